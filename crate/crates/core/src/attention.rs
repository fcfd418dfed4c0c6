//! Multi-head scaled dot-product attention over an explicit allowed-set mask.
//!
//! Shared by the backbone's causal self-attention and the span cross-attention.
//! Queries are `tq × d`, keys and values `l × d`; heads split `d` into equal
//! contiguous chunks and share one `tq × l` mask.

use crate::kernels::softmax_row_inplace;
use crate::tensor::{dot, Real};

pub(crate) struct AttnShape {
    pub tq: usize,
    pub l: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttnShape {
    fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Returns the concatenated head outputs (`tq × d`) and the attention
/// probabilities (`heads × tq × l`).
pub(crate) fn forward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    allowed: &[bool],
    s: &AttnShape,
) -> (Vec<F>, Vec<F>) {
    let hd = s.head_dim();
    let scale = F::one() / F::lit(hd as f64).sqrt();
    let mut out = vec![F::zero(); s.tq * s.d];
    let mut probs = vec![F::zero(); s.heads * s.tq * s.l];
    for h in 0..s.heads {
        let c0 = h * hd;
        for i in 0..s.tq {
            let qi = &q[i * s.d + c0..i * s.d + c0 + hd];
            let p = &mut probs[(h * s.tq + i) * s.l..(h * s.tq + i + 1) * s.l];
            for j in 0..s.l {
                p[j] = if allowed[i * s.l + j] {
                    dot(qi, &k[j * s.d + c0..j * s.d + c0 + hd]) * scale
                } else {
                    F::neg_infinity()
                };
            }
            softmax_row_inplace(p);
            let o = &mut out[i * s.d + c0..i * s.d + c0 + hd];
            for j in 0..s.l {
                let pj = p[j];
                if pj == F::zero() {
                    continue;
                }
                for (oc, &vc) in o.iter_mut().zip(&v[j * s.d + c0..j * s.d + c0 + hd]) {
                    *oc += pj * vc;
                }
            }
        }
    }
    (out, probs)
}

/// Backward of [`forward`]: returns `(dq, dk, dv)`.
pub(crate) fn backward<F: Real>(
    dout: &[F],
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    s: &AttnShape,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let hd = s.head_dim();
    let scale = F::one() / F::lit(hd as f64).sqrt();
    let mut dq = vec![F::zero(); s.tq * s.d];
    let mut dk = vec![F::zero(); s.l * s.d];
    let mut dv = vec![F::zero(); s.l * s.d];
    let mut ds = vec![F::zero(); s.l];
    for h in 0..s.heads {
        let c0 = h * hd;
        for i in 0..s.tq {
            let p = &probs[(h * s.tq + i) * s.l..(h * s.tq + i + 1) * s.l];
            let doi = &dout[i * s.d + c0..i * s.d + c0 + hd];
            let mut weighted = F::zero();
            for j in 0..s.l {
                ds[j] = if p[j] == F::zero() {
                    F::zero()
                } else {
                    dot(doi, &v[j * s.d + c0..j * s.d + c0 + hd])
                };
                weighted += p[j] * ds[j];
            }
            for j in 0..s.l {
                if p[j] == F::zero() {
                    continue;
                }
                let dsj = p[j] * (ds[j] - weighted) * scale;
                let kj = &k[j * s.d + c0..j * s.d + c0 + hd];
                let qi = &q[i * s.d + c0..i * s.d + c0 + hd];
                for c in 0..hd {
                    dq[i * s.d + c0 + c] += dsj * kj[c];
                    dk[j * s.d + c0 + c] += dsj * qi[c];
                    dv[j * s.d + c0 + c] += p[j] * doi[c];
                }
            }
        }
    }
    (dq, dk, dv)
}
