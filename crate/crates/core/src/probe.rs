//! Activation-magnitude probe and CAL cache accounting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ForwardOptions, Model, TokenBatch};
use crate::placement::PlacementName;
use crate::span::BatchBounds;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeRecord {
    pub config: PlacementName,
    /// 1-indexed host layer.
    pub layer: usize,
    /// Mean over samples of `‖X'' − X'‖₂ / ‖A_self‖₂`, in percent.
    pub ratio_ffn_pct: f64,
    /// Mean over samples of `‖X'' − X‖₂ / ‖A_self‖₂`, in percent.
    pub ratio_full_pct: f64,
    pub samples: usize,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        100.0 * num / den
    } else {
        0.0
    }
}

/// One record per placed layer, in placement order; empty for a model
/// without adapters. Norms are taken per sequence over its valid `T × d`
/// block, the ratio formed per sequence, then averaged over the batch.
pub fn measure_magnitudes<F: Real>(
    model: &Model<F>,
    batch: &TokenBatch,
    bounds: &BatchBounds,
) -> Result<Vec<MagnitudeRecord>> {
    if model.adapters.is_empty() {
        return Ok(Vec::new());
    }
    let out = model.forward(batch, bounds, ForwardOptions::probed())?;
    let mut records = Vec::new();
    for rec in &out.records {
        let Some(a) = &rec.adapter else { continue };
        let n = rec.attn_norm.len();
        let mean = |deltas: &[f64]| {
            deltas
                .iter()
                .zip(&rec.attn_norm)
                .map(|(&x, &den)| ratio(x, den))
                .sum::<f64>()
                / n.max(1) as f64
        };
        records.push(MagnitudeRecord {
            config: model.config().placement,
            layer: rec.layer,
            ratio_ffn_pct: mean(&a.ffn_delta),
            ratio_full_pct: mean(&a.block_delta),
            samples: n,
        });
    }
    Ok(records)
}

pub const HEATMAP_HEADER: &str = "config,layer,ratio_ffn_pct,ratio_full_pct";

/// Heatmap rows; layers without an adapter are simply absent.
pub fn write_heatmap_csv(mut w: impl Write, records: &[MagnitudeRecord]) -> std::io::Result<()> {
    writeln!(w, "{HEATMAP_HEADER}")?;
    for r in records {
        writeln!(w, "{},{},{:.6},{:.6}", r.config, r.layer, r.ratio_ffn_pct, r.ratio_full_pct)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvCacheReport {
    /// Total CAL key/value elements at each decode step.
    pub elements_per_step: Vec<usize>,
    pub bytes_per_element: usize,
}

impl KvCacheReport {
    pub fn is_constant(&self) -> bool {
        self.elements_per_step.windows(2).all(|w| w[0] == w[1])
    }
}

/// Greedy-decodes `n_decode_steps` tokens after `prompt` (no early stop)
/// and records the CAL cache size at every step.
pub fn kv_cache_report<F: Real>(
    model: &Model<F>,
    prompt: &[u32],
    bounds: &BatchBounds,
    n_decode_steps: usize,
    pad: u32,
) -> Result<KvCacheReport> {
    let g = model.generate_with_report(&[prompt.to_vec()], bounds, n_decode_steps, None, pad)?;
    let report = KvCacheReport {
        elements_per_step: g.cache_elements,
        bytes_per_element: std::mem::size_of::<F>(),
    };
    debug_assert!(report.is_constant());
    Ok(report)
}
