//! Toy pre-norm causal decoder used as the frozen backbone.
//!
//! Learned token embeddings plus fixed sinusoidal positions, `n_layers`
//! blocks of (RMSNorm → causal multi-head self-attention → residual,
//! RMSNorm → SwiGLU → residual), a final RMSNorm and an untied head.
//!
//! There is no way to mutate a `Backbone` once built: weights come from a
//! seed, from [`pretrain`], or from a checkpoint.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttnShape};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::kernels::{
    cross_entropy_with_denominator, rmsnorm_backward_rows, rmsnorm_rows, swiglu_backward_rows,
    swiglu_rows, SwigluGrads, SwigluSaved, SwigluWeights, RMS_EPS,
};
use crate::model::{ModelConfig, TokenBatch};
use crate::optim::{clip_global_norm, cosine_with_warmup, AdamW};
use crate::parallel_mlp::{self, ParallelMlpParams, PmlpTape};
use crate::tensor::{gemm_tn, mm, mm_nt, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<F = f32> {
    attn_norm: Tensor<F>,
    wq: Tensor<F>,
    wk: Tensor<F>,
    wv: Tensor<F>,
    wo: Tensor<F>,
    ffn_norm: Tensor<F>,
    gate: Tensor<F>,
    up: Tensor<F>,
    down: Tensor<F>,
}

pub(crate) const LAYER_TENSOR_NAMES: [&str; 9] =
    ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "gate", "up", "down"];

impl<F: Real> LayerWeights<F> {
    fn new(d: usize, init: &mut Init) -> Self {
        Self {
            attn_norm: Tensor::ones(&[d]),
            wq: init.weight(&[d, d]),
            wk: init.weight(&[d, d]),
            wv: init.weight(&[d, d]),
            wo: init.weight(&[d, d]),
            ffn_norm: Tensor::ones(&[d]),
            gate: init.weight(&[d, 4 * d]),
            up: init.weight(&[d, 4 * d]),
            down: init.weight(&[4 * d, d]),
        }
    }

    fn tensors(&self) -> [&Tensor<F>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.gate,
            &self.up,
            &self.down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<F>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.gate,
            &mut self.up,
            &mut self.down,
        ]
    }

    fn ffn(&self) -> SwigluWeights<'_, F> {
        let d = self.attn_norm.len();
        SwigluWeights {
            gate: self.gate.data(),
            up: self.up.data(),
            down: self.down.data(),
            d,
            hidden: 4 * d,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<F = f32> {
    d: usize,
    n_heads: usize,
    vocab: usize,
    max_t: usize,
    embed: Tensor<F>,
    layers: Vec<LayerWeights<F>>,
    final_norm: Tensor<F>,
    head: Tensor<F>,
}

pub(crate) struct LayerTape<F> {
    x: Vec<F>,
    xn1: Vec<F>,
    inv1: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<Vec<F>>,
    attn: Vec<F>,
    x_mid: Vec<F>,
    xn2: Vec<F>,
    inv2: Vec<F>,
    ffn: SwigluSaved<F>,
    pmlp: Option<PmlpTape<F>>,
}

pub(crate) struct LayerOutput<F> {
    pub h: Vec<F>,
    pub attn_out: Option<Vec<F>>,
    /// `‖A_self‖₂` per sample.
    pub attn_norm: Vec<f64>,
    /// `‖ParallelMLP delta‖₂` per sample, when an MLP is attached.
    pub pmlp_norm: Option<Vec<f64>>,
    pub tape: Option<LayerTape<F>>,
}

pub(crate) struct HeadOutput<F> {
    pub logits: Vec<F>,
    pub h: Vec<F>,
    pub xn: Vec<F>,
    pub inv: Vec<F>,
}

pub(crate) fn sample_norms<F: Real>(v: &[F], b: usize, t: usize, d: usize, lengths: &[usize]) -> Vec<f64> {
    (0..b)
        .map(|bi| {
            let len = lengths[bi].min(t);
            v[bi * t * d..(bi * t + len) * d]
                .iter()
                .map(|&a| a.as_f64() * a.as_f64())
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Fixed sinusoidal position code, scaled to the RMS of a freshly drawn
/// embedding row so neither signal swamps the other.
fn sinusoid(pos: usize, i: usize, d: usize) -> f64 {
    let pair = (i / 2) as f64;
    let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
    let scale = crate::init::INIT_STD * std::f64::consts::SQRT_2;
    scale * if i.is_multiple_of(2) { angle.sin() } else { angle.cos() }
}

impl<F: Real> Backbone<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let d = config.d_model;
        let embed = init.weight(&[config.vocab_size, d]);
        let layers = (0..config.n_layers).map(|_| LayerWeights::new(d, &mut init)).collect();
        let head = init.weight(&[d, config.vocab_size]);
        Ok(Self {
            d,
            n_heads: config.n_heads,
            vocab: config.vocab_size,
            max_t: config.max_seq_len,
            embed,
            layers,
            final_norm: Tensor::ones(&[d]),
            head,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_t
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    /// Named view of every weight, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![("backbone.embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSOR_NAMES.iter().zip(l.tensors()) {
                out.push((format!("backbone.layers.{}.{name}", i + 1), t));
            }
        }
        out.push(("backbone.final_norm".to_string(), &self.final_norm));
        out.push(("backbone.head".to_string(), &self.head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds a backbone from named tensors (checkpoint loading).
    pub fn from_named(config: &ModelConfig, mut lookup: impl FnMut(&str) -> Option<Tensor<F>>) -> Result<Self> {
        let template: Backbone<F> = Backbone::new(config, 0)?;
        let mut take = |name: String, like: &Tensor<F>| -> Result<Tensor<F>> {
            let t = lookup(&name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if t.shape() != like.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t)
        };
        let embed = take("backbone.embed".into(), &template.embed)?;
        let mut layers = Vec::with_capacity(template.layers.len());
        for (i, tl) in template.layers.iter().enumerate() {
            let mut ts = Vec::with_capacity(9);
            for (name, like) in LAYER_TENSOR_NAMES.iter().zip(tl.tensors()) {
                ts.push(take(format!("backbone.layers.{}.{name}", i + 1), like)?);
            }
            let mut it = ts.into_iter();
            let mut next = || it.next().expect("nine tensors");
            layers.push(LayerWeights {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ffn_norm: next(),
                gate: next(),
                up: next(),
                down: next(),
            });
        }
        let final_norm = take("backbone.final_norm".into(), &template.final_norm)?;
        let head = take("backbone.head".into(), &template.head)?;
        Ok(Self {
            layers,
            embed,
            final_norm,
            head,
            ..template
        })
    }

    pub fn cast<G: Real>(&self) -> Backbone<G> {
        let c = |t: &Tensor<F>| t.cast::<G>();
        Backbone {
            d: self.d,
            n_heads: self.n_heads,
            vocab: self.vocab,
            max_t: self.max_t,
            embed: c(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: c(&l.attn_norm),
                    wq: c(&l.wq),
                    wk: c(&l.wk),
                    wv: c(&l.wv),
                    wo: c(&l.wo),
                    ffn_norm: c(&l.ffn_norm),
                    gate: c(&l.gate),
                    up: c(&l.up),
                    down: c(&l.down),
                })
                .collect(),
            final_norm: c(&self.final_norm),
            head: c(&self.head),
        }
    }

    /// Little-endian bytes of every weight in [`Self::named_tensors`] order.
    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in self.named_tensors() {
            out.extend_from_slice(name.as_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 over [`Self::weight_bytes`], hex encoded.
    pub fn weight_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.weight_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    fn decay_mask(&self) -> Vec<bool> {
        let mut out = vec![true];
        for _ in &self.layers {
            out.extend([false, true, true, true, true, false, true, true, true]);
        }
        out.push(false);
        out.push(true);
        out
    }

    pub(crate) fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.t > self.max_t {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max {}",
                batch.t, self.max_t
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id as usize >= self.vocab) {
            return Err(Error::TargetOutOfRange {
                target: bad as usize,
                vocab: self.vocab,
            });
        }
        Ok(())
    }

    pub(crate) fn embed(&self, batch: &TokenBatch) -> Vec<F> {
        let d = self.d;
        let mut h = vec![F::zero(); batch.b * batch.t * d];
        for bi in 0..batch.b {
            for ti in 0..batch.t {
                let id = batch.ids[bi * batch.t + ti] as usize;
                let row = &mut h[(bi * batch.t + ti) * d..(bi * batch.t + ti + 1) * d];
                for (c, (o, &e)) in row.iter_mut().zip(self.embed.row(id)).enumerate() {
                    *o = e + F::lit(sinusoid(ti, c, d));
                }
            }
        }
        h
    }

    /// One decoder layer (0-based `idx`), optionally with a ParallelMLP
    /// attached in parallel to self-attention.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn layer_forward(
        &self,
        idx: usize,
        x: Vec<F>,
        b: usize,
        t: usize,
        lengths: &[usize],
        pmlp: Option<&ParallelMlpParams<F>>,
        keep: bool,
        capture: bool,
    ) -> LayerOutput<F> {
        let lw = &self.layers[idx];
        let d = self.d;
        let n = b * t;
        let eps = F::lit(RMS_EPS);
        let (xn1, inv1) = rmsnorm_rows(&x, lw.attn_norm.data(), d, eps);
        let q = mm(&xn1, lw.wq.data(), n, d, d);
        let k = mm(&xn1, lw.wk.data(), n, d, d);
        let v = mm(&xn1, lw.wv.data(), n, d, d);
        let shape = AttnShape { tq: t, l: t, d, heads: self.n_heads };
        let causal: Vec<bool> = (0..t * t).map(|x| x % t <= x / t).collect();
        let mut attn = vec![F::zero(); n * d];
        let mut probs = Vec::with_capacity(b);
        for bi in 0..b {
            let r = bi * t * d..(bi + 1) * t * d;
            let (o, p) = attention::forward(&q[r.clone()], &k[r.clone()], &v[r.clone()], &causal, &shape);
            attn[r].copy_from_slice(&o);
            probs.push(p);
        }
        let a = mm(&attn, lw.wo.data(), n, d, d);
        let attn_norm = sample_norms(&a, b, t, d, lengths);
        let mut x_mid = x.clone();
        crate::tensor::add_into(&mut x_mid, &a);
        let (pmlp_norm, pmlp_tape) = match pmlp {
            Some(p) => {
                let (m, tape) = parallel_mlp::forward_raw(&x, p, keep);
                crate::tensor::add_into(&mut x_mid, &m);
                (Some(sample_norms(&m, b, t, d, lengths)), tape)
            }
            None => (None, None),
        };
        let (xn2, inv2) = rmsnorm_rows(&x_mid, lw.ffn_norm.data(), d, eps);
        let (f, ffn) = swiglu_rows(&xn2, lw.ffn());
        let mut h = x_mid.clone();
        crate::tensor::add_into(&mut h, &f);
        let tape = keep.then_some(LayerTape {
            x,
            xn1,
            inv1,
            q,
            k,
            v,
            probs,
            attn,
            x_mid,
            xn2,
            inv2,
            ffn,
            pmlp: pmlp_tape,
        });
        LayerOutput {
            h,
            attn_out: capture.then_some(a),
            attn_norm,
            pmlp_norm,
            tape,
        }
    }

    /// Backward through layer `idx`. Weight gradients are only formed when
    /// `grads` is given (backbone pre-training); the frozen path passes
    /// `None`. When `need_input` is false the self-attention branch is not
    /// traversed and the returned vector is empty.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn layer_backward(
        &self,
        idx: usize,
        dh: &[F],
        tape: &LayerTape<F>,
        b: usize,
        t: usize,
        mut grads: Option<&mut LayerWeights<F>>,
        pmlp: Option<(&ParallelMlpParams<F>, &mut ParallelMlpParams<F>)>,
        need_input: bool,
    ) -> Vec<F> {
        let lw = &self.layers[idx];
        let d = self.d;
        let n = b * t;
        let sw = grads.as_deref_mut().map(|g| SwigluGrads {
            gate: g.gate.data_mut(),
            up: g.up.data_mut(),
            down: g.down.data_mut(),
        });
        let dxn2 = swiglu_backward_rows(dh, &tape.xn2, &tape.ffn, lw.ffn(), sw);
        let mut dmid = rmsnorm_backward_rows(
            &dxn2,
            &tape.x_mid,
            lw.ffn_norm.data(),
            &tape.inv2,
            d,
            grads.as_deref_mut().map(|g| g.ffn_norm.data_mut()),
        );
        crate::tensor::add_into(&mut dmid, dh);

        let mut dx_pmlp = None;
        if let (Some((p, acc)), Some(pt)) = (pmlp, tape.pmlp.as_ref()) {
            dx_pmlp = Some(parallel_mlp::backward_raw(&dmid, &tape.x, pt, p, acc));
        }
        if !need_input {
            return Vec::new();
        }

        if let Some(g) = grads.as_deref_mut() {
            gemm_tn(&tape.attn, &dmid, g.wo.data_mut(), n, d, d);
        }
        let dattn = mm_nt(&dmid, lw.wo.data(), n, d, d);
        let shape = AttnShape { tq: t, l: t, d, heads: self.n_heads };
        let mut dq = vec![F::zero(); n * d];
        let mut dk = vec![F::zero(); n * d];
        let mut dv = vec![F::zero(); n * d];
        for bi in 0..b {
            let r = bi * t * d..(bi + 1) * t * d;
            let (a, bb, c) = attention::backward(
                &dattn[r.clone()],
                &tape.q[r.clone()],
                &tape.k[r.clone()],
                &tape.v[r.clone()],
                &tape.probs[bi],
                &shape,
            );
            dq[r.clone()].copy_from_slice(&a);
            dk[r.clone()].copy_from_slice(&bb);
            dv[r].copy_from_slice(&c);
        }
        if let Some(g) = grads.as_deref_mut() {
            gemm_tn(&tape.xn1, &dq, g.wq.data_mut(), n, d, d);
            gemm_tn(&tape.xn1, &dk, g.wk.data_mut(), n, d, d);
            gemm_tn(&tape.xn1, &dv, g.wv.data_mut(), n, d, d);
        }
        let mut dxn1 = mm_nt(&dq, lw.wq.data(), n, d, d);
        crate::tensor::add_into(&mut dxn1, &mm_nt(&dk, lw.wk.data(), n, d, d));
        crate::tensor::add_into(&mut dxn1, &mm_nt(&dv, lw.wv.data(), n, d, d));
        let dx_attn = rmsnorm_backward_rows(
            &dxn1,
            &tape.x,
            lw.attn_norm.data(),
            &tape.inv1,
            d,
            grads.map(|g| g.attn_norm.data_mut()),
        );
        let mut dx = dmid;
        crate::tensor::add_into(&mut dx, &dx_attn);
        if let Some(dp) = dx_pmlp {
            crate::tensor::add_into(&mut dx, &dp);
        }
        dx
    }

    pub(crate) fn head_forward(&self, h: Vec<F>, n: usize) -> HeadOutput<F> {
        let (xn, inv) = rmsnorm_rows(&h, self.final_norm.data(), self.d, F::lit(RMS_EPS));
        let logits = mm(&xn, self.head.data(), n, self.d, self.vocab);
        HeadOutput { logits, h, xn, inv }
    }

    /// Gradient of the loss with respect to the final residual stream.
    pub(crate) fn head_backward(&self, dlogits: &[F], out: &HeadOutput<F>, grads: Option<&mut Backbone<F>>) -> Vec<F> {
        let n = out.inv.len();
        let dxn = mm_nt(dlogits, self.head.data(), n, self.vocab, self.d);
        let dgain = match grads {
            Some(g) => {
                gemm_tn(&out.xn, dlogits, g.head.data_mut(), n, self.d, self.vocab);
                Some(g.final_norm.data_mut())
            }
            None => None,
        };
        rmsnorm_backward_rows(&dxn, &out.h, self.final_norm.data(), &out.inv, self.d, dgain)
    }
}

/// Settings for next-token pre-training of a fresh backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            lr: 3e-3,
            warmup_ratio: 0.05,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

/// Trains a freshly initialized backbone on next-token prediction over
/// `sequences` (loss on every non-padding position) and returns it frozen,
/// with the per-step loss curve.
pub fn pretrain(
    config: &ModelConfig,
    sequences: &[Vec<u32>],
    pad: u32,
    opts: &PretrainOptions,
) -> Result<(Backbone<f32>, Vec<f64>)> {
    if sequences.is_empty() {
        return Err(Error::Config("empty pre-training corpus".into()));
    }
    let mut model: Backbone<f32> = Backbone::new(config, opts.seed)?;
    let mut opt = AdamW::new(model.named_tensors().into_iter().map(|(_, t)| t), opts.weight_decay);
    let decay = model.decay_mask();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5e_ed0f_ba5e);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut picked = Vec::with_capacity(opts.batch_size);
        while picked.len() < opts.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(sequences[order[cursor]].clone());
            cursor += 1;
        }
        let batch = TokenBatch::from_sequences(&picked, pad);
        let targets = batch.next_token_targets(|_, _| true);
        let denom = targets.iter().filter(|t| t.is_some()).count().max(1);

        let (b, t, d) = (batch.b, batch.t, model.d);
        model.check_batch(&batch)?;
        let mut h = model.embed(&batch);
        let mut tapes = Vec::with_capacity(model.layers.len());
        for idx in 0..model.layers.len() {
            let out = model.layer_forward(idx, h, b, t, &batch.lengths, None, true, false);
            h = out.h;
            tapes.push(out.tape.expect("kept"));
        }
        let head = model.head_forward(h, b * t);
        let logits = Tensor::new(vec![b * t, model.vocab], head.logits.clone())?;
        let ce = cross_entropy_with_denominator(&logits, &targets, denom)?;
        let loss = ce.loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        losses.push(loss);

        let mut grads = model.zeros_like();
        let mut dh = model.head_backward(ce.grad.data(), &head, Some(&mut grads));
        for idx in (0..model.layers.len()).rev() {
            dh = model.layer_backward(idx, &dh, &tapes[idx], b, t, Some(&mut grads.layers[idx]), None, true);
        }
        for bi in 0..b {
            for ti in 0..t {
                let id = batch.ids[bi * t + ti] as usize;
                let src = &dh[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                crate::tensor::add_into(grads.embed.row_mut(id), src);
            }
        }
        let mut gl = grads.tensors_mut();
        clip_global_norm(&mut gl, opts.max_grad_norm);
        let lr = cosine_with_warmup(step, opts.steps, opts.lr, opts.warmup_ratio);
        let gref: Vec<&Tensor<f32>> = gl.iter().map(|g| &**g).collect();
        let mut params = model.tensors_mut();
        opt.update(&mut params, &gref, &decay, lr);
        if step % 100 == 0 {
            log::debug!("pretrain step {step} loss {loss:.4}");
        }
    }
    Ok((model, losses))
}
