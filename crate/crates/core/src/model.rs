//! Frozen backbone plus adapter blocks at the resolved placement.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, HeadOutput, LayerTape};
use crate::cal::{self, CalKvCache, CalParams, CalTape};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::parallel_mlp::ParallelMlpParams;
use crate::placement::{resolve_placement, PlacementConfig, PlacementName};
use crate::span::BatchBounds;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AdapterKind {
    None,
    #[default]
    Cal,
    ParallelMlp,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::None => "none",
            AdapterKind::Cal => "cal",
            AdapterKind::ParallelMlp => "parallel_mlp",
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "none" | "base" => Ok(AdapterKind::None),
            "cal" => Ok(AdapterKind::Cal),
            "parallelmlp" | "pmlp" | "mlp" => Ok(AdapterKind::ParallelMlp),
            _ => Err(Error::Config(format!("unknown adapter kind `{s}`"))),
        }
    }
}

impl TryFrom<String> for AdapterKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AdapterKind> for String {
    fn from(k: AdapterKind) -> String {
        k.as_str().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub adapter: AdapterKind,
    pub placement: PlacementName,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            vocab_size: 128,
            max_seq_len: 256,
            adapter: AdapterKind::Cal,
            placement: PlacementName::Late8th,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model = {} is not divisible by n_heads = {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("vocab_size and max_seq_len must be positive".into()));
        }
        resolve_placement(self.placement, self.n_layers)?;
        Ok(())
    }

    /// Layers carrying an adapter; empty for [`AdapterKind::None`].
    pub fn placement(&self) -> Result<PlacementConfig> {
        let mut p = resolve_placement(self.placement, self.n_layers)?;
        if self.adapter == AdapterKind::None {
            p.layers.clear();
        }
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[allow(clippy::large_enum_variant)]
pub enum AdapterBlock<F = f32> {
    Cal(CalParams<F>),
    ParallelMlp(ParallelMlpParams<F>),
}

impl<F: Real> AdapterBlock<F> {
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<F>)> {
        match self {
            AdapterBlock::Cal(p) => p.tensors().to_vec(),
            AdapterBlock::ParallelMlp(p) => p.tensors().to_vec(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<F>)> {
        match self {
            AdapterBlock::Cal(p) => p.tensors_mut().into_iter().collect(),
            AdapterBlock::ParallelMlp(p) => p.tensors_mut().into_iter().collect(),
        }
    }

    fn prefix(&self) -> &'static str {
        match self {
            AdapterBlock::Cal(_) => "cal",
            AdapterBlock::ParallelMlp(_) => "pmlp",
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Trainable adapter parameters, one block per placed layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet<F = f32> {
    pub kind: AdapterKind,
    /// 1-indexed host layers, ascending.
    pub layers: Vec<usize>,
    pub blocks: Vec<AdapterBlock<F>>,
}

impl<F: Real> AdapterSet<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let layers = config.placement()?.layers;
        let mut init = Init::new(seed);
        let d = config.d_model;
        let blocks = layers
            .iter()
            .map(|_| match config.adapter {
                AdapterKind::Cal => CalParams::new(d, config.n_heads, &mut init).map(AdapterBlock::Cal),
                _ => ParallelMlpParams::new(d, &mut init).map(AdapterBlock::ParallelMlp),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: config.adapter,
            layers,
            blocks,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block_at(&self, layer: usize) -> Option<&AdapterBlock<F>> {
        self.layers.iter().position(|&l| l == layer).map(|i| &self.blocks[i])
    }

    /// `adapter.{layer}.{cal|pmlp}.{name}`
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (layer, block) in self.layers.iter().zip(&self.blocks) {
            let prefix = block.prefix();
            for (name, t) in block.tensors() {
                out.push((format!("adapter.{layer}.{prefix}.{name}"), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.tensors_mut().into_iter().map(|(_, t)| t))
            .collect()
    }

    /// Weight decay applies to matrices, not to norm gains.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.named_tensors().iter().map(|(_, t)| t.rank() == 2).collect()
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(AdapterBlock::param_count).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }

    pub fn cast<G: Real>(&self) -> AdapterSet<G> {
        AdapterSet {
            kind: self.kind,
            layers: self.layers.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| match b {
                    AdapterBlock::Cal(p) => AdapterBlock::Cal(p.cast()),
                    AdapterBlock::ParallelMlp(p) => AdapterBlock::ParallelMlp(p.cast()),
                })
                .collect(),
        }
    }

    /// Rebuilds the set for `config` from named tensors (checkpoint loading).
    pub fn from_named(config: &ModelConfig, mut lookup: impl FnMut(&str) -> Option<Tensor<F>>) -> Result<Self> {
        let mut set: AdapterSet<F> = AdapterSet::new(config, 0)?;
        let layers = set.layers.clone();
        for (layer, block) in layers.iter().zip(set.blocks.iter_mut()) {
            let prefix = block.prefix();
            for (name, slot) in block.tensors_mut() {
                let key = format!("adapter.{layer}.{prefix}.{name}");
                let t = lookup(&key).ok_or_else(|| Error::Format(format!("missing tensor `{key}`")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!(
                        "tensor `{key}` has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
        }
        Ok(set)
    }
}

/// Right-padded batch of token ids (`B × T`) with per-row valid lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub b: usize,
    pub t: usize,
    pub ids: Vec<u32>,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[Vec<u32>], pad: u32) -> Self {
        let t = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * t);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad, t - s.len()));
        }
        Self {
            b: seqs.len(),
            t,
            ids,
            lengths: seqs.iter().map(Vec::len).collect(),
        }
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.t..b * self.t + self.lengths[b]]
    }

    /// Next-token targets, one per position (`B·T`). Position `i` of row `b`
    /// predicts token `i + 1` when it exists and `keep(b, i + 1)` holds.
    pub fn next_token_targets(&self, keep: impl Fn(usize, usize) -> bool) -> Vec<Option<usize>> {
        let mut out = vec![None; self.b * self.t];
        for b in 0..self.b {
            for i in 0..self.lengths[b].saturating_sub(1) {
                if keep(b, i + 1) {
                    out[b * self.t + i] = Some(self.ids[b * self.t + i + 1] as usize);
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Keep activations for [`Model::backward_adapters_only`].
    pub tape: bool,
    /// Return per-layer norm records.
    pub probe: bool,
    /// Also copy out per-layer self-attention outputs and adapter inputs.
    pub capture: bool,
}

impl ForwardOptions {
    pub fn taped() -> Self {
        Self { tape: true, ..Self::default() }
    }

    pub fn probed() -> Self {
        Self { probe: true, ..Self::default() }
    }
}

/// Per-sample norms of an adapter's sublayer deltas at one host layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterNorms {
    /// CAL: `‖X'' − X'‖₂`; ParallelMLP: its whole delta.
    pub ffn_delta: Vec<f64>,
    /// CAL: `‖X'' − X‖₂`; ParallelMLP: same as `ffn_delta`.
    pub block_delta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord<F = f32> {
    /// 1-indexed.
    pub layer: usize,
    /// `‖A_self‖₂` per sample, over its valid positions.
    pub attn_norm: Vec<f64>,
    pub adapter: Option<AdapterNorms>,
    /// `B × T × d` self-attention output (`capture` only).
    pub attn_out: Option<Tensor<F>>,
    /// `B × T × d` residual stream entering the CAL block (`capture` only).
    pub adapter_input: Option<Tensor<F>>,
}

/// Activations of one forward pass needed for the adapter backward.
pub struct ModelTape<F> {
    b: usize,
    t: usize,
    first_adapter: usize,
    layers: Vec<Option<LayerTape<F>>>,
    cal: Vec<Option<CalTape<F>>>,
    head: HeadOutput<F>,
}

pub struct ForwardOutput<F = f32> {
    /// `B × T × V`
    pub logits: Tensor<F>,
    pub records: Vec<LayerRecord<F>>,
    pub tape: Option<ModelTape<F>>,
}

/// Which frozen components the adapter backward pass had to traverse.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BackwardTrace {
    /// Backbone layers (1-indexed) whose activations were back-propagated.
    pub backbone_layers: Vec<usize>,
    pub head: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F = f32> {
    config: ModelConfig,
    backbone: Backbone<F>,
    pub adapters: AdapterSet<F>,
}

/// Backbone from `seed`, adapters from a seed derived from it.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model<f32>> {
    let backbone = Backbone::new(config, seed)?;
    Model::with_backbone(config, backbone, seed.wrapping_add(1))
}

impl<F: Real> Model<F> {
    /// Attaches freshly initialized adapters to an existing frozen backbone.
    pub fn with_backbone(config: &ModelConfig, backbone: Backbone<F>, adapter_seed: u64) -> Result<Self> {
        let adapters = AdapterSet::new(config, adapter_seed)?;
        Self::from_parts(config, backbone, adapters)
    }

    pub fn from_parts(config: &ModelConfig, backbone: Backbone<F>, adapters: AdapterSet<F>) -> Result<Self> {
        config.validate()?;
        let shape_ok = backbone.n_layers() == config.n_layers
            && backbone.d() == config.d_model
            && backbone.vocab() == config.vocab_size
            && backbone.n_heads() == config.n_heads;
        if !shape_ok {
            return Err(Error::Config("backbone does not match model config".into()));
        }
        if adapters.layers != config.placement()?.layers || (!adapters.is_empty() && adapters.kind != config.adapter) {
            return Err(Error::Config("adapters do not match model config".into()));
        }
        Ok(Self {
            config: config.clone(),
            backbone,
            adapters,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone<F> {
        &self.backbone
    }

    /// Same backbone, no adapters.
    pub fn base(&self) -> Model<F> {
        let config = ModelConfig {
            adapter: AdapterKind::None,
            ..self.config.clone()
        };
        Model {
            adapters: AdapterSet {
                kind: AdapterKind::None,
                layers: Vec::new(),
                blocks: Vec::new(),
            },
            config,
            backbone: self.backbone.clone(),
        }
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            backbone: self.backbone.cast(),
            adapters: self.adapters.cast(),
        }
    }

    fn check_bounds(&self, batch: &TokenBatch, bounds: &BatchBounds) -> Result<()> {
        if batch.lengths.len() != batch.b || batch.ids.len() != batch.b * batch.t {
            return Err(Error::Shape("malformed token batch".into()));
        }
        if bounds.len() != batch.b {
            return Err(Error::Shape(format!(
                "{} bound rows for batch of {}",
                bounds.len(),
                batch.b
            )));
        }
        for (r, &len) in bounds.rows().iter().zip(&batch.lengths) {
            r.check_within(len)?;
        }
        Ok(())
    }

    pub fn forward(&self, batch: &TokenBatch, bounds: &BatchBounds, opts: ForwardOptions) -> Result<ForwardOutput<F>> {
        self.forward_impl(batch, bounds, opts, None)
    }

    /// Forward pass whose CAL blocks read span keys/values from `caches`
    /// (one per CAL block, from [`Self::prefill_cal_caches`]) instead of
    /// projecting them again.
    pub fn forward_cached(
        &self,
        batch: &TokenBatch,
        bounds: &BatchBounds,
        caches: &[CalKvCache<F>],
    ) -> Result<Tensor<F>> {
        let n_cal = self.adapters.blocks.iter().filter(|b| matches!(b, AdapterBlock::Cal(_))).count();
        if caches.len() != n_cal || caches.iter().any(|c| c.bounds() != bounds) {
            return Err(Error::Shape("CAL caches do not match adapters or bounds".into()));
        }
        Ok(self.forward_impl(batch, bounds, ForwardOptions::default(), Some(caches))?.logits)
    }

    /// Span key/value caches of every CAL block for a prompt batch.
    pub fn prefill_cal_caches(&self, batch: &TokenBatch, bounds: &BatchBounds) -> Result<Vec<CalKvCache<F>>> {
        let opts = ForwardOptions { capture: true, ..ForwardOptions::default() };
        let out = self.forward(batch, bounds, opts)?;
        let mut caches = Vec::new();
        for rec in &out.records {
            if let Some(AdapterBlock::Cal(p)) = self.adapters.block_at(rec.layer) {
                let x = rec.adapter_input.as_ref().expect("captured");
                caches.push(cal::prefill_kv(x, bounds, p)?);
            }
        }
        Ok(caches)
    }

    fn forward_impl(
        &self,
        batch: &TokenBatch,
        bounds: &BatchBounds,
        opts: ForwardOptions,
        caches: Option<&[CalKvCache<F>]>,
    ) -> Result<ForwardOutput<F>> {
        self.backbone.check_batch(batch)?;
        self.check_bounds(batch, bounds)?;
        let (b, t, d) = (batch.b, batch.t, self.backbone.d());
        let n_layers = self.backbone.n_layers();
        let first = self.adapters.layers.first().copied().unwrap_or(n_layers + 1);
        let as_tensor = |v: &[F]| Tensor::new(vec![b, t, d], v.to_vec()).expect("sized");

        let mut h = self.backbone.embed(batch);
        let mut records = Vec::new();
        let mut layer_tapes = Vec::with_capacity(n_layers);
        let mut cal_tapes = Vec::with_capacity(n_layers);
        let mut cal_seen = 0;
        for idx in 0..n_layers {
            let layer = idx + 1;
            let block = self.adapters.block_at(layer);
            let pmlp = match block {
                Some(AdapterBlock::ParallelMlp(p)) => Some(p),
                _ => None,
            };
            let keep_layer = opts.tape && (layer > first || (layer == first && pmlp.is_some()));
            let out = self.backbone.layer_forward(idx, h, b, t, &batch.lengths, pmlp, keep_layer, opts.capture);
            h = out.h;
            layer_tapes.push(out.tape);
            let mut rec = LayerRecord {
                layer,
                attn_norm: out.attn_norm,
                adapter: out.pmlp_norm.map(|n| AdapterNorms {
                    ffn_delta: n.clone(),
                    block_delta: n,
                }),
                attn_out: None,
                adapter_input: None,
            };
            rec.attn_out = out.attn_out.as_deref().map(as_tensor);
            let mut cal_tape = None;
            if let Some(AdapterBlock::Cal(p)) = block {
                if opts.capture {
                    rec.adapter_input = Some(as_tensor(&h));
                }
                let (y, probe) = match caches {
                    Some(c) => cal::forward_cached_raw(&h, t, &c[cal_seen], p, Some(&batch.lengths)),
                    None => {
                        let (y, probe, tape) = cal::forward_raw(&h, b, t, bounds, p, Some(&batch.lengths), opts.tape);
                        cal_tape = tape;
                        (y, probe)
                    }
                };
                cal_seen += 1;
                h = y;
                rec.adapter = Some(AdapterNorms {
                    ffn_delta: probe.ffn_delta_norm,
                    block_delta: probe.block_delta_norm,
                });
            }
            cal_tapes.push(cal_tape);
            if opts.probe || opts.capture {
                records.push(rec);
            }
        }
        let head = self.backbone.head_forward(h, b * t);
        let logits = Tensor::new(vec![b, t, self.backbone.vocab()], head.logits.clone())?;
        let tape = opts.tape.then_some(ModelTape {
            b,
            t,
            first_adapter: first,
            layers: layer_tapes,
            cal: cal_tapes,
            head,
        });
        Ok(ForwardOutput { logits, records, tape })
    }

    /// Logits only.
    pub fn logits(&self, batch: &TokenBatch, bounds: &BatchBounds) -> Result<Tensor<F>> {
        Ok(self.forward(batch, bounds, ForwardOptions::default())?.logits)
    }

    /// Gradients of the adapter parameters given `dlogits = ∂L/∂logits`. No
    /// backbone weight gradient is ever formed; activation gradients flow
    /// back through the backbone only down to the lowest adapter.
    pub fn backward_adapters_only(
        &self,
        tape: Option<&ModelTape<F>>,
        dlogits: &Tensor<F>,
    ) -> Result<(AdapterSet<F>, BackwardTrace)> {
        let mut grads = self.adapters.zeros_like();
        let trace = self.backward_into(tape, dlogits, &mut grads)?;
        Ok((grads, trace))
    }

    /// Like [`Self::backward_adapters_only`] but accumulates into `grads`.
    pub fn backward_into(
        &self,
        tape: Option<&ModelTape<F>>,
        dlogits: &Tensor<F>,
        grads: &mut AdapterSet<F>,
    ) -> Result<BackwardTrace> {
        let tape = tape.ok_or(Error::MissingTape("forward was not taped"))?;
        let (b, t) = (tape.b, tape.t);
        if dlogits.len() != b * t * self.backbone.vocab() {
            return Err(Error::Shape(format!(
                "logit gradient {:?} for taped batch [{b}, {t}, {}]",
                dlogits.shape(),
                self.backbone.vocab()
            )));
        }
        if grads.layers != self.adapters.layers {
            return Err(Error::Shape("gradient buffer does not match adapters".into()));
        }
        let mut trace = BackwardTrace::default();
        if self.adapters.is_empty() {
            return Ok(trace);
        }
        trace.head = true;
        let mut dh = self.backbone.head_backward(dlogits.data(), &tape.head, None);
        for idx in (0..self.backbone.n_layers()).rev() {
            let layer = idx + 1;
            if layer < tape.first_adapter {
                break;
            }
            let slot = self.adapters.layers.iter().position(|&l| l == layer);
            match slot.map(|i| (&self.adapters.blocks[i], &mut grads.blocks[i])) {
                Some((AdapterBlock::Cal(p), AdapterBlock::Cal(acc))) => {
                    let ct = tape.cal[idx].as_ref().ok_or(Error::MissingTape("CAL tape"))?;
                    dh = cal::backward_raw(&dh, ct, p, acc);
                    if layer == tape.first_adapter {
                        break;
                    }
                    let lt = tape.layers[idx].as_ref().ok_or(Error::MissingTape("layer tape"))?;
                    dh = self.backbone.layer_backward(idx, &dh, lt, b, t, None, None, true);
                }
                Some((AdapterBlock::ParallelMlp(p), AdapterBlock::ParallelMlp(acc))) => {
                    let lt = tape.layers[idx].as_ref().ok_or(Error::MissingTape("layer tape"))?;
                    let need_input = layer > tape.first_adapter;
                    dh = self.backbone.layer_backward(idx, &dh, lt, b, t, None, Some((p, acc)), need_input);
                }
                None => {
                    let lt = tape.layers[idx].as_ref().ok_or(Error::MissingTape("layer tape"))?;
                    dh = self.backbone.layer_backward(idx, &dh, lt, b, t, None, None, true);
                }
                _ => return Err(Error::Shape("gradient buffer kind mismatch".into())),
            }
            trace.backbone_layers.push(layer);
        }
        trace.backbone_layers.reverse();
        Ok(trace)
    }

    /// Greedy continuation of each prompt by up to `max_new` tokens,
    /// stopping a row early at `stop`. Bounds refer to the prompts.
    pub fn generate(
        &self,
        prompts: &[Vec<u32>],
        bounds: &BatchBounds,
        max_new: usize,
        stop: Option<u32>,
        pad: u32,
    ) -> Result<Vec<Vec<u32>>> {
        Ok(self.generate_with_report(prompts, bounds, max_new, stop, pad)?.tokens)
    }

    /// [`Self::generate`], recording the CAL cache size at every step. The
    /// span caches are built once from the prompts and reused unchanged.
    pub fn generate_with_report(
        &self,
        prompts: &[Vec<u32>],
        bounds: &BatchBounds,
        max_new: usize,
        stop: Option<u32>,
        pad: u32,
    ) -> Result<Generation> {
        let caches = self.prefill_cal_caches(&TokenBatch::from_sequences(prompts, pad), bounds)?;
        let mut seqs: Vec<Vec<u32>> = prompts.to_vec();
        let mut tokens = vec![Vec::new(); prompts.len()];
        let mut done = vec![false; prompts.len()];
        let mut cache_elements = Vec::with_capacity(max_new);
        let v = self.backbone.vocab();
        for _ in 0..max_new {
            if done.iter().all(|&d| d) {
                break;
            }
            let batch = TokenBatch::from_sequences(&seqs, pad);
            let logits = self.forward_cached(&batch, bounds, &caches)?;
            cache_elements.push(caches.iter().map(CalKvCache::element_count).sum());
            for (bi, seq) in seqs.iter_mut().enumerate() {
                if done[bi] {
                    continue;
                }
                let pos = batch.lengths[bi] - 1;
                let row = &logits.data()[(bi * batch.t + pos) * v..(bi * batch.t + pos + 1) * v];
                let next = argmax(row) as u32;
                tokens[bi].push(next);
                seq.push(next);
                if Some(next) == stop || seq.len() >= self.backbone.max_seq_len() {
                    done[bi] = true;
                }
            }
        }
        Ok(Generation { tokens, cache_elements })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Generated tokens per prompt.
    pub tokens: Vec<Vec<u32>>,
    /// Total CAL key/value elements held at each decode step.
    pub cache_elements: Vec<usize>,
}

pub(crate) fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::span::SpanBounds;

    fn small(kind: AdapterKind, placement: PlacementName) -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 8,
            n_heads: 2,
            vocab_size: 20,
            max_seq_len: 16,
            adapter: kind,
            placement,
        }
    }

    #[test]
    fn adapter_kind_parses() {
        assert_eq!("ParallelMLP".parse::<AdapterKind>().unwrap(), AdapterKind::ParallelMlp);
        assert_eq!("cal".parse::<AdapterKind>().unwrap(), AdapterKind::Cal);
        assert!("lora".parse::<AdapterKind>().is_err());
    }

    #[test]
    fn config_rejects_bad_heads() {
        let c = ModelConfig { n_heads: 3, ..small(AdapterKind::Cal, PlacementName::Last) };
        assert!(build_model(&c, 0).is_err());
    }

    #[test]
    fn last_placement_backward_touches_only_the_head() {
        let m = build_model(&small(AdapterKind::Cal, PlacementName::Last), 1).unwrap();
        let batch = TokenBatch::from_sequences(&[vec![1, 2, 3, 4]], 0);
        let bounds = BatchBounds::new(vec![SpanBounds::new(0, 2).unwrap()]);
        let out = m.forward(&batch, &bounds, ForwardOptions::taped()).unwrap();
        let g = Tensor::ones(out.logits.shape());
        let (_, trace) = m.backward_adapters_only(out.tape.as_ref(), &g).unwrap();
        assert!(trace.head);
        assert!(trace.backbone_layers.is_empty());
    }

    #[test]
    fn every2_backward_stops_at_lowest_adapter() {
        let m = build_model(&small(AdapterKind::Cal, PlacementName::Every2), 1).unwrap();
        let batch = TokenBatch::from_sequences(&[vec![1, 2, 3, 4]], 0);
        let bounds = BatchBounds::new(vec![SpanBounds::new(0, 2).unwrap()]);
        let out = m.forward(&batch, &bounds, ForwardOptions::taped()).unwrap();
        let g = Tensor::ones(out.logits.shape());
        let (_, trace) = m.backward_adapters_only(out.tape.as_ref(), &g).unwrap();
        assert_eq!(trace.backbone_layers, vec![3, 4]);
    }

    #[test]
    fn backward_needs_tape() {
        let m = build_model(&small(AdapterKind::Cal, PlacementName::Last), 1).unwrap();
        let g = Tensor::zeros(&[1, 4, 20]);
        assert!(matches!(m.backward_adapters_only(None, &g), Err(Error::MissingTape(_))));
    }

    #[test]
    fn targets_respect_mask_and_length() {
        let batch = TokenBatch::from_sequences(&[vec![5, 6, 7], vec![8]], 0);
        let t = batch.next_token_targets(|_, pos| pos >= 2);
        assert_eq!(t, vec![None, Some(7), None, None, None, None]);
    }
}
