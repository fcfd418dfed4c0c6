//! Normalization, activation, softmax and loss kernels with their backward
//! passes.
//!
//! The `Tensor` functions are the public surface; the `*_rows` helpers work on
//! raw row-major slices and are what the model code calls in its hot loops.

use crate::error::{Error, Result};
use crate::tensor::{gemm_tn, mm, mm_nt, Real, Tensor};

/// Default epsilon used by every RMSNorm in the crate.
pub const RMS_EPS: f64 = 1e-6;

/// Row-wise softmax of `logits + mask` where `mask` holds `0` (allowed) or
/// `-inf` (blocked). Rows with no allowed entry come back as all zeros.
///
/// `mask` must either match `logits` exactly or be a single row that is
/// broadcast over every row of `logits`.
pub fn masked_softmax<F: Real>(logits: &Tensor<F>, mask: &Tensor<F>) -> Result<Tensor<F>> {
    let n = logits.cols();
    let broadcast = if mask.shape() == logits.shape() {
        false
    } else if mask.len() == n {
        true
    } else {
        return Err(Error::Shape(format!(
            "mask {:?} does not broadcast to logits {:?}",
            mask.shape(),
            logits.shape()
        )));
    };
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let m = if broadcast { mask.data() } else { mask.row(r) };
        let row = out.row_mut(r);
        for (z, &mv) in row.iter_mut().zip(m) {
            *z += mv;
        }
        softmax_row_inplace(row);
    }
    Ok(out)
}

/// In-place softmax over the finite entries of `row`; `-inf` entries become 0.
/// A row without finite entries becomes all zeros.
pub(crate) fn softmax_row_inplace<F: Real>(row: &mut [F]) {
    let mut max = F::neg_infinity();
    for &v in row.iter() {
        if v.is_nan() {
            // propagate rather than mistake the row for a masked one
            row.iter_mut().for_each(|x| *x = F::nan());
            return;
        }
        if v > max {
            max = v;
        }
    }
    if max == F::neg_infinity() {
        row.iter_mut().for_each(|v| *v = F::zero());
        return;
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = if *v == F::neg_infinity() {
            F::zero()
        } else {
            (*v - max).exp()
        };
        sum += *v;
    }
    let inv = F::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// RMSNorm over the last dimension: `gain_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rmsnorm<F: Real>(x: &Tensor<F>, gain: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    let d = x.cols();
    if gain.len() != d {
        return Err(Error::Shape(format!(
            "rmsnorm gain of length {} for last dim {d}",
            gain.len()
        )));
    }
    let (y, _) = rmsnorm_rows(x.data(), gain.data(), d, eps);
    Tensor::new(x.shape().to_vec(), y)
}

/// Returns the normalized rows and the per-row inverse RMS.
pub(crate) fn rmsnorm_rows<F: Real>(x: &[F], gain: &[F], d: usize, eps: F) -> (Vec<F>, Vec<F>) {
    let rows = x.len() / d;
    let mut y = vec![F::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    let dn = F::lit(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().map(|&v| v * v).sum::<F>() / dn;
        let ir = if ms + eps > F::zero() {
            F::one() / (ms + eps).sqrt()
        } else {
            // zero row with eps = 0
            F::zero()
        };
        inv.push(ir);
        for ((o, &v), &g) in y[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gain) {
            *o = g * v * ir;
        }
    }
    (y, inv)
}

/// Backward of [`rmsnorm_rows`]. Returns `dx`; accumulates into `dgain` when
/// given.
pub(crate) fn rmsnorm_backward_rows<F: Real>(
    dy: &[F],
    x: &[F],
    gain: &[F],
    inv: &[F],
    d: usize,
    mut dgain: Option<&mut [F]>,
) -> Vec<F> {
    let rows = x.len() / d;
    let dn = F::lit(d as f64);
    let mut dx = vec![F::zero(); x.len()];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let ir = inv[r];
        let mut ux = F::zero();
        for i in 0..d {
            ux += gain[i] * dyr[i] * xr[i];
        }
        let c = ir * ir * ir * ux / dn;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] = ir * gain[i] * dyr[i] - c * xr[i];
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for i in 0..d {
                dg[i] += dyr[i] * xr[i] * ir;
            }
        }
    }
    dx
}

#[inline]
pub(crate) fn sigmoid<F: Real>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

#[inline]
pub(crate) fn silu<F: Real>(v: F) -> F {
    v * sigmoid(v)
}

#[inline]
pub(crate) fn silu_grad<F: Real>(v: F) -> F {
    let s = sigmoid(v);
    s * (F::one() + v * (F::one() - s))
}

/// Weights of a SwiGLU feed-forward network: `silu(x·gate) ⊙ (x·up) · down`.
#[derive(Clone, Copy)]
pub(crate) struct SwigluWeights<'a, F> {
    pub gate: &'a [F],
    pub up: &'a [F],
    pub down: &'a [F],
    pub d: usize,
    pub hidden: usize,
}

pub(crate) struct SwigluSaved<F> {
    pub gate_pre: Vec<F>,
    pub up_pre: Vec<F>,
    pub act: Vec<F>,
}

pub(crate) fn swiglu_rows<F: Real>(x: &[F], w: SwigluWeights<'_, F>) -> (Vec<F>, SwigluSaved<F>) {
    let rows = x.len() / w.d;
    let gate_pre = mm(x, w.gate, rows, w.d, w.hidden);
    let up_pre = mm(x, w.up, rows, w.d, w.hidden);
    let act: Vec<F> = gate_pre
        .iter()
        .zip(&up_pre)
        .map(|(&a, &b)| silu(a) * b)
        .collect();
    let out = mm(&act, w.down, rows, w.hidden, w.d);
    (
        out,
        SwigluSaved {
            gate_pre,
            up_pre,
            act,
        },
    )
}

/// Gradients of the three SwiGLU matrices.
pub(crate) struct SwigluGrads<'a, F> {
    pub gate: &'a mut [F],
    pub up: &'a mut [F],
    pub down: &'a mut [F],
}

/// Backward of [`swiglu_rows`]: returns `dx`; accumulates weight gradients
/// when `grads` is given.
pub(crate) fn swiglu_backward_rows<F: Real>(
    dout: &[F],
    x: &[F],
    saved: &SwigluSaved<F>,
    w: SwigluWeights<'_, F>,
    grads: Option<SwigluGrads<'_, F>>,
) -> Vec<F> {
    let rows = x.len() / w.d;
    let dact = mm_nt(dout, w.down, rows, w.d, w.hidden);
    let mut dgate = vec![F::zero(); dact.len()];
    let mut dup = vec![F::zero(); dact.len()];
    for i in 0..dact.len() {
        let a = saved.gate_pre[i];
        dgate[i] = dact[i] * saved.up_pre[i] * silu_grad(a);
        dup[i] = dact[i] * silu(a);
    }
    if let Some(g) = grads {
        gemm_tn(&saved.act, dout, g.down, rows, w.hidden, w.d);
        gemm_tn(x, &dgate, g.gate, rows, w.d, w.hidden);
        gemm_tn(x, &dup, g.up, rows, w.d, w.hidden);
    }
    let mut dx = mm_nt(&dgate, w.gate, rows, w.hidden, w.d);
    let dx_up = mm_nt(&dup, w.up, rows, w.hidden, w.d);
    crate::tensor::add_into(&mut dx, &dx_up);
    dx
}

/// SwiGLU feed-forward network on the rows of `x`.
///
/// `gate_w`, `up_w`: `d × h`; `down_w`: `h × d`.
pub fn swiglu_ffn<F: Real>(
    x: &Tensor<F>,
    gate_w: &Tensor<F>,
    up_w: &Tensor<F>,
    down_w: &Tensor<F>,
) -> Result<Tensor<F>> {
    let d = x.cols();
    let ok = gate_w.rank() == 2
        && gate_w.shape()[0] == d
        && up_w.shape() == gate_w.shape()
        && down_w.rank() == 2
        && down_w.shape()[0] == gate_w.shape()[1]
        && down_w.shape()[1] == d;
    if !ok {
        return Err(Error::Shape(format!(
            "swiglu: x {:?}, gate {:?}, up {:?}, down {:?}",
            x.shape(),
            gate_w.shape(),
            up_w.shape(),
            down_w.shape()
        )));
    }
    let w = SwigluWeights {
        gate: gate_w.data(),
        up: up_w.data(),
        down: down_w.data(),
        d,
        hidden: gate_w.shape()[1],
    };
    let (out, _) = swiglu_rows(x.data(), w);
    Tensor::new(x.shape().to_vec(), out)
}

/// Result of a cross-entropy evaluation.
#[derive(Clone, Debug)]
pub struct CrossEntropy<F> {
    /// Sum of negative log-likelihoods over counted positions divided by the
    /// denominator.
    pub loss: F,
    /// Number of positions that contributed.
    pub count: usize,
    /// Gradient of `loss` with respect to the logits.
    pub grad: Tensor<F>,
}

/// Mean negative log-likelihood over positions whose target is `Some`.
pub fn cross_entropy<F: Real>(
    logits: &Tensor<F>,
    targets: &[Option<usize>],
) -> Result<CrossEntropy<F>> {
    let count = targets.iter().filter(|t| t.is_some()).count();
    cross_entropy_with_denominator(logits, targets, count.max(1))
}

/// Like [`cross_entropy`] but divides by an explicit `denom`; gradient
/// accumulation uses the token count of the whole accumulated batch here.
pub fn cross_entropy_with_denominator<F: Real>(
    logits: &Tensor<F>,
    targets: &[Option<usize>],
    denom: usize,
) -> Result<CrossEntropy<F>> {
    let v = logits.cols();
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "cross entropy: {} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let inv = F::one() / F::lit(denom as f64);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = F::zero();
    let mut count = 0;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= v {
            return Err(Error::TargetOutOfRange { target: t, vocab: v });
        }
        count += 1;
        let row = logits.row(r);
        let g = grad.row_mut(r);
        g.copy_from_slice(row);
        softmax_row_inplace(g);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<F>().ln();
        total += lse - row[t];
        g[t] -= F::one();
        g.iter_mut().for_each(|x| *x *= inv);
    }
    Ok(CrossEntropy {
        loss: total * inv,
        count,
        grad,
    })
}
