#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sysanchor::cal::CalParams;
use sysanchor::model::{AdapterBlock, AdapterSet};
use sysanchor::{BatchBounds, SpanBounds, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], a: f32) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

/// Overwrites every weight, including the zero-initialized output
/// projections, with uniform noise; norm gains land in `[0.5, 1.5)`.
pub fn randomize_cal(p: &mut CalParams<f32>, rng: &mut ChaCha8Rng, a: f32) {
    for (name, t) in p.tensors_mut() {
        let gain = name.starts_with("norm");
        for v in t.data_mut() {
            *v = if gain { rng.random_range(0.5..1.5) } else { rng.random_range(-a..a) };
        }
    }
}

pub fn randomize_adapters(set: &mut AdapterSet<f32>, rng: &mut ChaCha8Rng, a: f32) {
    for block in &mut set.blocks {
        match block {
            AdapterBlock::Cal(p) => randomize_cal(p, rng, a),
            AdapterBlock::ParallelMlp(p) => {
                for (name, t) in p.tensors_mut() {
                    let gain = name == "norm";
                    for v in t.data_mut() {
                        *v = if gain { rng.random_range(0.5..1.5) } else { rng.random_range(-a..a) };
                    }
                }
            }
        }
    }
}

/// Random `[s, e)` inside a sequence of length `t`; empty spans are `(0, 0)`.
pub fn random_span(rng: &mut ChaCha8Rng, t: usize) -> SpanBounds {
    if t == 0 || rng.random_bool(0.15) {
        return SpanBounds::NONE;
    }
    let s = rng.random_range(0..t);
    let e = rng.random_range(s + 1..=t);
    SpanBounds::new(s, e).unwrap()
}

/// Positions a query at `i` may read: inside `[s, e)` and not after `i`.
pub fn allowed_keys(span: SpanBounds, i: usize) -> Vec<usize> {
    (span.s..span.e).filter(|&p| p <= i).collect()
}

fn rms(x: &[f64], g: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(g).map(|(v, &g)| v * inv * g as f64).collect()
}

fn vecmat(v: &[f64], w: &Tensor<f32>) -> Vec<f64> {
    let (n, m) = (w.shape()[0], w.shape()[1]);
    assert_eq!(v.len(), n);
    (0..m)
        .map(|j| (0..n).map(|i| v[i] * w.data()[i * m + j] as f64).sum())
        .collect()
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// Direct evaluation of the CAL block, one query row at a time, over the
/// explicit set of readable span positions.
pub fn cal_oracle(x: &Tensor<f32>, bounds: &BatchBounds, p: &CalParams<f32>) -> Vec<f64> {
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let heads = p.n_heads;
    let hd = d / heads;
    let row = |bi: usize, i: usize| -> Vec<f64> {
        x.data()[(bi * t + i) * d..(bi * t + i + 1) * d].iter().map(|&v| v as f64).collect()
    };
    let mut out = Vec::with_capacity(b * t * d);
    for bi in 0..b {
        let span = bounds.get(bi);
        let keys: Vec<(Vec<f64>, Vec<f64>)> = (0..t)
            .map(|pos| {
                let xn = rms(&row(bi, pos), p.norm1.data());
                (vecmat(&xn, &p.wk), vecmat(&xn, &p.wv))
            })
            .collect();
        for i in 0..t {
            let xi = row(bi, i);
            if span.is_empty() {
                out.extend(xi);
                continue;
            }
            let q = vecmat(&rms(&xi, p.norm1.data()), &p.wq);
            let open = allowed_keys(span, i);
            let mut attn = vec![0.0; d];
            for h in 0..heads {
                let r = h * hd..(h + 1) * hd;
                let scores: Vec<f64> = open
                    .iter()
                    .map(|&pos| {
                        q[r.clone()].iter().zip(&keys[pos].0[r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = w.iter().sum();
                for (&pos, wk) in open.iter().zip(&w) {
                    for c in r.clone() {
                        attn[c] += wk / z * keys[pos].1[c];
                    }
                }
            }
            let mid: Vec<f64> = xi.iter().zip(vecmat(&attn, &p.wo)).map(|(a, b)| a + b).collect();
            let xn2 = rms(&mid, p.norm2.data());
            let hidden: Vec<f64> = vecmat(&xn2, &p.gate)
                .into_iter()
                .zip(vecmat(&xn2, &p.up))
                .map(|(g, u)| silu(g) * u)
                .collect();
            out.extend(mid.iter().zip(vecmat(&hidden, &p.down)).map(|(a, b)| a + b));
        }
    }
    out
}

/// SwiGLU hidden activations `silu(x̂·gate) ⊙ (x̂·up)` of the block's FFN
/// for one residual row `x`, with `x̂ = RMSNorm(x)` under `norm2`.
pub fn cal_ffn_hidden(x: &[f32], p: &CalParams<f32>) -> Vec<f64> {
    let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let xn = rms(&xf, p.norm2.data());
    vecmat(&xn, &p.gate)
        .into_iter()
        .zip(vecmat(&xn, &p.up))
        .map(|(g, u)| silu(g) * u)
        .collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs_diff_f32(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
