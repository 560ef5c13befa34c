//! Continual few-shot text-to-SQL parsing on a synthetic task stream:
//! a small autodiff engine, an encoder-decoder parser with soft prompts,
//! prompt banks over a frozen backbone, an in-context teacher distilled into
//! the prompted student, and the experiment harness around them.

pub mod continual;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod retriever;
pub mod seq2seq;
pub mod taskstream;

/// Double-precision tensor.
pub type Tensor = numerics::Tensor<f64>;
/// Double-precision tape.
pub type Tape = numerics::Tape<f64>;
pub type ModelParams = seq2seq::ModelParams<f64>;
pub type PromptMatrix = seq2seq::PromptMatrix<f64>;
