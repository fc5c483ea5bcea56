//! Weight-space communication between agents sharing one frozen decoder.
//!
//! Senders run the frozen backbone and contribute only hidden states. A trained
//! parameter generator turns each sender's conditioning into LoRA factors, a scalar gate
//! fuses them, and the receiver decodes under the fused patch, which is removed
//! immediately afterward.

pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod conditioning;
pub mod error;
pub mod fusion;
pub mod generator;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod tokenizer;
pub mod training;
pub mod workbench;

pub use error::{Result, TflowError};
