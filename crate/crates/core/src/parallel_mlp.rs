//! ParallelMLP baseline: a zero-initialized SwiGLU MLP that reads the
//! host layer's input and is added to the residual stream alongside the
//! self-attention output.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::init::Init;
use crate::kernels::{
    rmsnorm_backward_rows, rmsnorm_rows, swiglu_backward_rows, swiglu_rows, SwigluGrads,
    SwigluSaved, SwigluWeights, RMS_EPS,
};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelMlpParams<F = f32> {
    pub norm: Tensor<F>,
    pub gate: Tensor<F>,
    pub up: Tensor<F>,
    pub down: Tensor<F>,
}

pub const PMLP_TENSOR_NAMES: [&str; 4] = ["norm", "gate", "up", "down"];

impl<F: Real> ParallelMlpParams<F> {
    pub fn new(d: usize, init: &mut Init) -> Result<Self> {
        Ok(Self {
            norm: Tensor::ones(&[d]),
            gate: init.weight(&[d, 4 * d]),
            up: init.weight(&[d, 4 * d]),
            down: Tensor::zeros(&[4 * d, d]),
        })
    }

    pub fn d(&self) -> usize {
        self.norm.len()
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<F>); 4] {
        [
            ("norm", &self.norm),
            ("gate", &self.gate),
            ("up", &self.up),
            ("down", &self.down),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<F>); 4] {
        [
            ("norm", &mut self.norm),
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

    pub fn cast<G: Real>(&self) -> ParallelMlpParams<G> {
        ParallelMlpParams {
            norm: self.norm.cast(),
            gate: self.gate.cast(),
            up: self.up.cast(),
            down: self.down.cast(),
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

pub(crate) struct PmlpTape<F> {
    xn: Vec<F>,
    inv: Vec<F>,
    ffn: SwigluSaved<F>,
}

/// MLP delta for the rows of `x` (the host layer input).
pub(crate) fn forward_raw<F: Real>(x: &[F], p: &ParallelMlpParams<F>, keep: bool) -> (Vec<F>, Option<PmlpTape<F>>) {
    let (xn, inv) = rmsnorm_rows(x, p.norm.data(), p.d(), F::lit(RMS_EPS));
    let (out, ffn) = swiglu_rows(&xn, p.ffn());
    (out, keep.then_some(PmlpTape { xn, inv, ffn }))
}

/// Accumulates parameter gradients into `acc`; returns the gradient with
/// respect to the host layer input.
pub(crate) fn backward_raw<F: Real>(
    dout: &[F],
    x: &[F],
    tape: &PmlpTape<F>,
    p: &ParallelMlpParams<F>,
    acc: &mut ParallelMlpParams<F>,
) -> Vec<F> {
    let ParallelMlpParams { norm, gate, up, down } = acc;
    let dxn = swiglu_backward_rows(
        dout,
        &tape.xn,
        &tape.ffn,
        p.ffn(),
        Some(SwigluGrads {
            gate: gate.data_mut(),
            up: up.data_mut(),
            down: down.data_mut(),
        }),
    );
    rmsnorm_backward_rows(&dxn, x, p.norm.data(), &tape.inv, p.d(), Some(norm.data_mut()))
}
