//! Cross-attention layer (CAL) block.
//!
//! Queries come from every position of the normalized residual stream; keys
//! and values come only from the sample's own system-prompt span `[s, e)`,
//! stored in a compact buffer of `ell_max` slots (slot `j` is absolute
//! position `s + j`). A query at position `i` may read slot `j` iff
//! `s + j <= i` and `j < ell_sys`. After the attention sublayer
//! (`X' = X + Attn·W_O`) comes a SwiGLU sublayer (`X'' = X' + FFN(X')·W_D`).
//! Both output projections start at zero, so a fresh block is the identity.
//!
//! A sample whose bounds are `(0, 0)` passes through untouched.

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttnShape};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::kernels::{
    rmsnorm_backward_rows, rmsnorm_rows, swiglu_backward_rows, swiglu_rows, SwigluGrads,
    SwigluSaved, SwigluWeights, RMS_EPS,
};
use crate::span::BatchBounds;
use crate::tensor::{gemm_tn, mm, mm_nt, Real, Tensor};

/// Weights of one CAL block. `gate`/`up` are `d × 4d`, `down` is `4d × d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalParams<F = f32> {
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub norm1: Tensor<F>,
    pub norm2: Tensor<F>,
    pub gate: Tensor<F>,
    pub up: Tensor<F>,
    pub down: Tensor<F>,
    pub n_heads: usize,
}

pub const CAL_TENSOR_NAMES: [&str; 9] =
    ["wq", "wk", "wv", "wo", "norm1", "norm2", "gate", "up", "down"];

impl<F: Real> CalParams<F> {
    /// Fresh block: `wo` and `down` are zero, norm gains one, the rest drawn
    /// from `init`.
    pub fn new(d: usize, n_heads: usize, init: &mut Init) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d = {d} is not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            wq: init.weight(&[d, d]),
            wk: init.weight(&[d, d]),
            wv: init.weight(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            norm1: Tensor::ones(&[d]),
            norm2: Tensor::ones(&[d]),
            gate: init.weight(&[d, 4 * d]),
            up: init.weight(&[d, 4 * d]),
            down: Tensor::zeros(&[4 * d, d]),
            n_heads,
        })
    }

    pub fn d(&self) -> usize {
        self.norm1.len()
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<F>); 9] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("norm1", &self.norm1),
            ("norm2", &self.norm2),
            ("gate", &self.gate),
            ("up", &self.up),
            ("down", &self.down),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<F>); 9] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("norm1", &mut self.norm1),
            ("norm2", &mut self.norm2),
            ("gate", &mut self.gate),
            ("up", &mut self.up),
            ("down", &mut self.down),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }

    pub fn cast<G: Real>(&self) -> CalParams<G> {
        CalParams {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            norm1: self.norm1.cast(),
            norm2: self.norm2.cast(),
            gate: self.gate.cast(),
            up: self.up.cast(),
            down: self.down.cast(),
            n_heads: self.n_heads,
        }
    }

    fn ffn(&self) -> SwigluWeights<'_, F> {
        let d = self.d();
        SwigluWeights {
            gate: self.gate.data(),
            up: self.up.data(),
            down: self.down.data(),
            d,
            hidden: 4 * d,
        }
    }
}

/// Additive cross-attention mask over `t` query positions and `slots` key
/// slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossAttnMask {
    t: usize,
    slots: usize,
    allowed: Vec<bool>,
}

impl CrossAttnMask {
    /// Mask for a single sequence with no padding slots.
    pub fn build(s: usize, ell_sys: usize, t: usize) -> Result<Self> {
        Self::build_padded(s, ell_sys, t, ell_sys)
    }

    /// Mask over `ell_max` slots; slots at or beyond `ell_sys` are padding.
    pub fn build_padded(s: usize, ell_sys: usize, t: usize, ell_max: usize) -> Result<Self> {
        if s + ell_sys > t || ell_sys > ell_max {
            return Err(Error::Bounds {
                s,
                e: s + ell_sys,
                len: t,
            });
        }
        let allowed = (0..t)
            .flat_map(|i| (0..ell_max).map(move |j| j < ell_sys && s + j <= i))
            .collect();
        Ok(Self {
            t,
            slots: ell_max,
            allowed,
        })
    }

    pub fn is_open(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.slots + j]
    }

    pub fn value<F: Real>(&self, i: usize, j: usize) -> F {
        if self.is_open(i, j) {
            F::zero()
        } else {
            F::neg_infinity()
        }
    }

    /// `t × slots` tensor of `0` / `-inf`.
    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::from_fn(&[self.t, self.slots], |x| {
            self.value(x / self.slots.max(1), x % self.slots.max(1))
        })
    }

    pub fn positions(&self) -> usize {
        self.t
    }

    pub fn slots(&self) -> usize {
        self.slots
    }
}

/// Keys and values of the system-prompt span, built once at prefill.
#[derive(Clone, Debug, PartialEq)]
pub struct CalKvCache<F = f32> {
    /// `B × ell_max × d`, zero beyond each row's span length.
    k: Tensor<F>,
    v: Tensor<F>,
    bounds: BatchBounds,
}

impl<F: Real> CalKvCache<F> {
    pub fn keys(&self) -> &Tensor<F> {
        &self.k
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.v
    }

    pub fn bounds(&self) -> &BatchBounds {
        &self.bounds
    }

    pub fn element_count(&self) -> usize {
        self.k.len() + self.v.len()
    }

    pub fn byte_size(&self) -> usize {
        self.element_count() * std::mem::size_of::<F>()
    }

    fn ell_max(&self) -> usize {
        self.k.shape()[1]
    }
}

/// Per-sample sublayer delta norms recorded by a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalProbe {
    /// `‖X' − X‖₂`
    pub attn_delta_norm: Vec<f64>,
    /// `‖X'' − X'‖₂`
    pub ffn_delta_norm: Vec<f64>,
    /// `‖X'' − X‖₂`
    pub block_delta_norm: Vec<f64>,
}

/// Activations kept for [`cal_backward`].
pub struct CalTape<F> {
    b: usize,
    t: usize,
    x: Vec<F>,
    xn1: Vec<F>,
    inv1: Vec<F>,
    q: Vec<F>,
    cache: CalKvCache<F>,
    probs: Vec<Vec<F>>,
    attn: Vec<F>,
    x_mid: Vec<F>,
    xn2: Vec<F>,
    inv2: Vec<F>,
    ffn: SwigluSaved<F>,
}

fn check_input<F: Real>(x: &Tensor<F>, bounds: &BatchBounds, params: &CalParams<F>) -> Result<(usize, usize)> {
    let d = params.d();
    if x.rank() != 3 || x.shape()[2] != d {
        return Err(Error::Shape(format!(
            "CAL input {:?}, expected [B, T, {d}]",
            x.shape()
        )));
    }
    let (b, t) = (x.shape()[0], x.shape()[1]);
    if bounds.len() != b {
        return Err(Error::Shape(format!(
            "{} bound rows for batch of {b}",
            bounds.len()
        )));
    }
    for r in bounds.rows() {
        r.check_within(t)?;
    }
    Ok((b, t))
}

/// Projects the span rows of the normalized stream `xn` (`B·T × d`) into the
/// padded key/value buffers.
fn project_kv<F: Real>(xn: &[F], b: usize, t: usize, bounds: &BatchBounds, p: &CalParams<F>) -> CalKvCache<F> {
    let d = p.d();
    let lmax = bounds.ell_max();
    let mut k = vec![F::zero(); b * lmax * d];
    let mut v = vec![F::zero(); b * lmax * d];
    for (bi, r) in bounds.rows().iter().enumerate() {
        let ell = r.len();
        if ell == 0 {
            continue;
        }
        let span = &xn[(bi * t + r.s) * d..(bi * t + r.e) * d];
        let kb = mm(span, p.wk.data(), ell, d, d);
        let vb = mm(span, p.wv.data(), ell, d, d);
        k[bi * lmax * d..(bi * lmax + ell) * d].copy_from_slice(&kb);
        v[bi * lmax * d..(bi * lmax + ell) * d].copy_from_slice(&vb);
    }
    CalKvCache {
        k: Tensor::new(vec![b, lmax, d], k).expect("sized"),
        v: Tensor::new(vec![b, lmax, d], v).expect("sized"),
        bounds: bounds.clone(),
    }
}

fn slot_mask(s: usize, ell: usize, lmax: usize, positions: &[usize]) -> Vec<bool> {
    positions
        .iter()
        .flat_map(|&i| (0..lmax).map(move |j| j < ell && s + j <= i))
        .collect()
}

/// Runs both sublayers for `tq` query rows per sample at the given absolute
/// `positions` (one per row, `B·tq` total) against a prepared cache.
#[allow(clippy::too_many_arguments)]
fn apply<F: Real>(
    x: &[F],
    tq: usize,
    positions: &[usize],
    xn1_inv: Option<(Vec<F>, Vec<F>)>,
    cache: CalKvCache<F>,
    p: &CalParams<F>,
    lengths: Option<&[usize]>,
    keep: bool,
) -> (Vec<F>, CalProbe, Option<CalTape<F>>) {
    let d = p.d();
    let b = cache.bounds.len();
    let lmax = cache.ell_max();
    let (xn1, inv1) = xn1_inv.unwrap_or_else(|| rmsnorm_rows(x, p.norm1.data(), d, F::lit(RMS_EPS)));
    let q = mm(&xn1, p.wq.data(), b * tq, d, d);

    let shape = AttnShape { tq, l: lmax, d, heads: p.n_heads };
    let mut attn = vec![F::zero(); b * tq * d];
    let mut probs = Vec::with_capacity(b);
    for (bi, r) in cache.bounds.rows().iter().enumerate() {
        if r.is_empty() {
            probs.push(Vec::new());
            continue;
        }
        let rows = bi * tq * d..(bi + 1) * tq * d;
        let kv = bi * lmax * d..(bi + 1) * lmax * d;
        let allowed = slot_mask(r.s, r.len(), lmax, &positions[bi * tq..(bi + 1) * tq]);
        let (o, pr) = attention::forward(
            &q[rows.clone()],
            &cache.k.data()[kv.clone()],
            &cache.v.data()[kv],
            &allowed,
            &shape,
        );
        attn[rows].copy_from_slice(&o);
        probs.push(pr);
    }
    let delta1 = mm(&attn, p.wo.data(), b * tq, d, d);
    let mut x_mid = x.to_vec();
    crate::tensor::add_into(&mut x_mid, &delta1);
    let (xn2, inv2) = rmsnorm_rows(&x_mid, p.norm2.data(), d, F::lit(RMS_EPS));
    let (f, ffn) = swiglu_rows(&xn2, p.ffn());
    let mut out = x_mid.clone();
    crate::tensor::add_into(&mut out, &f);

    let mut probe = CalProbe::default();
    for (bi, r) in cache.bounds.rows().iter().enumerate() {
        let rows = bi * tq * d..(bi + 1) * tq * d;
        if r.is_empty() {
            out[rows.clone()].copy_from_slice(&x[rows]);
            probe.attn_delta_norm.push(0.0);
            probe.ffn_delta_norm.push(0.0);
            probe.block_delta_norm.push(0.0);
            continue;
        }
        let len = lengths.map_or(tq, |l| l[bi].min(tq));
        let valid = bi * tq * d..(bi * tq + len) * d;
        let norm = |v: &[F]| v.iter().map(|&a| a.as_f64() * a.as_f64()).sum::<f64>().sqrt();
        let both: Vec<F> = delta1[valid.clone()]
            .iter()
            .zip(&f[valid.clone()])
            .map(|(&a, &c)| a + c)
            .collect();
        probe.attn_delta_norm.push(norm(&delta1[valid.clone()]));
        probe.ffn_delta_norm.push(norm(&f[valid]));
        probe.block_delta_norm.push(norm(&both));
    }

    let tape = keep.then(|| CalTape {
        b,
        t: tq,
        x: x.to_vec(),
        xn1,
        inv1,
        q,
        cache,
        probs,
        attn,
        x_mid,
        xn2,
        inv2,
        ffn,
    });
    (out, probe, tape)
}

pub(crate) fn forward_raw<F: Real>(
    x: &[F],
    b: usize,
    t: usize,
    bounds: &BatchBounds,
    p: &CalParams<F>,
    lengths: Option<&[usize]>,
    keep: bool,
) -> (Vec<F>, CalProbe, Option<CalTape<F>>) {
    let d = p.d();
    let (xn1, inv1) = rmsnorm_rows(x, p.norm1.data(), d, F::lit(RMS_EPS));
    let cache = project_kv(&xn1, b, t, bounds, p);
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    apply(x, t, &positions, Some((xn1, inv1)), cache, p, lengths, keep)
}

/// Full-sequence forward over `x` of shape `B × T × d`.
pub fn cal_forward<F: Real>(
    x: &Tensor<F>,
    bounds: &BatchBounds,
    params: &CalParams<F>,
) -> Result<(Tensor<F>, CalProbe)> {
    let (b, t) = check_input(x, bounds, params)?;
    let (out, probe, _) = forward_raw(x.data(), b, t, bounds, params, None, false);
    Ok((Tensor::new(x.shape().to_vec(), out)?, probe))
}

/// Like [`cal_forward`] but also returns the activations needed for
/// [`cal_backward`].
pub fn cal_forward_taped<F: Real>(
    x: &Tensor<F>,
    bounds: &BatchBounds,
    params: &CalParams<F>,
) -> Result<(Tensor<F>, CalProbe, CalTape<F>)> {
    let (b, t) = check_input(x, bounds, params)?;
    let (out, probe, tape) = forward_raw(x.data(), b, t, bounds, params, None, true);
    Ok((Tensor::new(x.shape().to_vec(), out)?, probe, tape.expect("kept")))
}

/// Gradients of the block parameters plus the input gradient.
pub struct CalGrads<F> {
    pub params: CalParams<F>,
    pub input: Tensor<F>,
}

pub(crate) fn backward_raw<F: Real>(
    grad: &[F],
    tape: &CalTape<F>,
    p: &CalParams<F>,
    acc: &mut CalParams<F>,
) -> Vec<F> {
    let d = p.d();
    let (b, t) = (tape.b, tape.t);
    let n = b * t;
    let lmax = tape.cache.ell_max();
    let bounds = tape.cache.bounds.rows();

    let mut g = grad.to_vec();
    for (bi, r) in bounds.iter().enumerate() {
        if r.is_empty() {
            g[bi * t * d..(bi + 1) * t * d].iter_mut().for_each(|v| *v = F::zero());
        }
    }

    // X'' = X' + FFN(norm2(X'))
    let CalParams {
        wq: gwq,
        wk: gwk,
        wv: gwv,
        wo: gwo,
        norm1: gn1,
        norm2: gn2,
        gate: ggate,
        up: gup,
        down: gdown,
        ..
    } = acc;
    let dxn2 = swiglu_backward_rows(
        &g,
        &tape.xn2,
        &tape.ffn,
        p.ffn(),
        Some(SwigluGrads {
            gate: ggate.data_mut(),
            up: gup.data_mut(),
            down: gdown.data_mut(),
        }),
    );
    let mut dmid = rmsnorm_backward_rows(&dxn2, &tape.x_mid, p.norm2.data(), &tape.inv2, d, Some(gn2.data_mut()));
    crate::tensor::add_into(&mut dmid, &g);

    // X' = X + Attn·W_O
    gemm_tn(&tape.attn, &dmid, gwo.data_mut(), n, d, d);
    let dattn = mm_nt(&dmid, p.wo.data(), n, d, d);
    let shape = AttnShape { tq: t, l: lmax, d, heads: p.n_heads };
    let mut dq = vec![F::zero(); n * d];
    let mut dxn1 = vec![F::zero(); n * d];
    for (bi, r) in bounds.iter().enumerate() {
        if r.is_empty() {
            continue;
        }
        let rows = bi * t * d..(bi + 1) * t * d;
        let kv = bi * lmax * d..(bi + 1) * lmax * d;
        let (dqb, dkb, dvb) = attention::backward(
            &dattn[rows.clone()],
            &tape.q[rows.clone()],
            &tape.cache.k.data()[kv.clone()],
            &tape.cache.v.data()[kv],
            &tape.probs[bi],
            &shape,
        );
        dq[rows].copy_from_slice(&dqb);
        let ell = r.len();
        let span_rows = (bi * t + r.s) * d..(bi * t + r.e) * d;
        let span = &tape.xn1[span_rows.clone()];
        gemm_tn(span, &dkb[..ell * d], gwk.data_mut(), ell, d, d);
        gemm_tn(span, &dvb[..ell * d], gwv.data_mut(), ell, d, d);
        let mut dspan = mm_nt(&dkb[..ell * d], p.wk.data(), ell, d, d);
        let dv_in = mm_nt(&dvb[..ell * d], p.wv.data(), ell, d, d);
        crate::tensor::add_into(&mut dspan, &dv_in);
        crate::tensor::add_into(&mut dxn1[span_rows], &dspan);
    }
    gemm_tn(&tape.xn1, &dq, gwq.data_mut(), n, d, d);
    let dq_in = mm_nt(&dq, p.wq.data(), n, d, d);
    crate::tensor::add_into(&mut dxn1, &dq_in);
    let dx_attn = rmsnorm_backward_rows(&dxn1, &tape.x, p.norm1.data(), &tape.inv1, d, Some(gn1.data_mut()));

    let mut dx = dmid;
    crate::tensor::add_into(&mut dx, &dx_attn);
    for (bi, r) in bounds.iter().enumerate() {
        if r.is_empty() {
            let rows = bi * t * d..(bi + 1) * t * d;
            dx[rows.clone()].copy_from_slice(&grad[rows]);
        }
    }
    dx
}

/// Exact gradients of `⟨upstream, cal_forward(x)⟩` with respect to every
/// parameter and the input.
pub fn cal_backward<F: Real>(
    upstream: &Tensor<F>,
    tape: Option<&CalTape<F>>,
    params: &CalParams<F>,
) -> Result<CalGrads<F>> {
    let tape = tape.ok_or(Error::MissingTape("CAL forward was not taped"))?;
    let d = params.d();
    if upstream.len() != tape.b * tape.t * d {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} for taped batch [{}, {}, {d}]",
            upstream.shape(),
            tape.b,
            tape.t
        )));
    }
    let mut acc = params.zeros_like();
    let dx = backward_raw(upstream.data(), tape, params, &mut acc);
    Ok(CalGrads {
        params: acc,
        input: Tensor::new(upstream.shape().to_vec(), dx)?,
    })
}

/// Builds the span key/value cache from a prefix covering every span.
pub fn prefill_kv<F: Real>(
    x_prefix: &Tensor<F>,
    bounds: &BatchBounds,
    params: &CalParams<F>,
) -> Result<CalKvCache<F>> {
    let (b, t) = check_input(x_prefix, bounds, params)?;
    let (xn1, _) = rmsnorm_rows(x_prefix.data(), params.norm1.data(), params.d(), F::lit(RMS_EPS));
    Ok(project_kv(&xn1, b, t, bounds, params))
}

/// CAL output for one new token per sample (`x_new`: `B × d`) at absolute
/// `positions`, using a prefilled cache.
pub fn decode_step<F: Real>(
    x_new: &Tensor<F>,
    positions: &[usize],
    cache: &CalKvCache<F>,
    params: &CalParams<F>,
) -> Result<Tensor<F>> {
    let d = params.d();
    let b = cache.bounds.len();
    if x_new.len() != b * d || positions.len() != b {
        return Err(Error::Shape(format!(
            "decode input {:?} with {} positions for batch of {b}",
            x_new.shape(),
            positions.len()
        )));
    }
    let (out, _, _) = apply(x_new.data(), 1, positions, None, cache.clone(), params, None, false);
    Tensor::new(x_new.shape().to_vec(), out)
}

/// Runs the block over `tq` rows per sample (positions `0..tq`) against a
/// cache built earlier from the same spans.
pub(crate) fn forward_cached_raw<F: Real>(
    x: &[F],
    tq: usize,
    cache: &CalKvCache<F>,
    p: &CalParams<F>,
    lengths: Option<&[usize]>,
) -> (Vec<F>, CalProbe) {
    let b = cache.bounds.len();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..tq).collect();
    let (out, probe, _) = apply(x, tq, &positions, None, cache.clone(), p, lengths, false);
    (out, probe)
}

/// Stateful decoder: prefill once, then decode token by token.
pub struct CalDecoder<'a, F: Real = f32> {
    params: &'a CalParams<F>,
    cache: Option<CalKvCache<F>>,
}

impl<'a, F: Real> CalDecoder<'a, F> {
    pub fn new(params: &'a CalParams<F>) -> Self {
        Self { params, cache: None }
    }

    pub fn prefill(&mut self, x_prefix: &Tensor<F>, bounds: &BatchBounds) -> Result<()> {
        self.cache = Some(prefill_kv(x_prefix, bounds, self.params)?);
        Ok(())
    }

    pub fn step(&self, x_new: &Tensor<F>, positions: &[usize]) -> Result<Tensor<F>> {
        let cache = self.cache.as_ref().ok_or(Error::DecodeBeforePrefill)?;
        decode_step(x_new, positions, cache, self.params)
    }

    pub fn cache(&self) -> Option<&CalKvCache<F>> {
        self.cache.as_ref()
    }
}
