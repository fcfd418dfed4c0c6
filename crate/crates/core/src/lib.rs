//! Span-anchored cross-attention adapters on a frozen toy decoder.
//!
//! A CAL block reads keys and values only from a sequence's system-prompt
//! span and writes back into the residual stream; its output projections
//! start at zero so the adapted model equals the frozen one at step 0.

pub mod backbone;
pub mod budget;
pub mod cal;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod harness;
pub mod init;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod parallel_mlp;
pub mod placement;
pub mod probe;
pub mod span;
pub mod task;
pub mod tensor;
pub mod tokenizer;
pub mod train;

mod attention;

pub use error::{Error, Result};
pub use model::{build_model, AdapterKind, ForwardOptions, Model, ModelConfig, TokenBatch};
pub use placement::{resolve_placement, PlacementConfig, PlacementName};
pub use span::{batch_bounds, detect_span, BatchBounds, Dialect, SpanBounds};
pub use tensor::{matmul, Real, Tensor};
