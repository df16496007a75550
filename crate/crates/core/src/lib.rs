//! Federated training of a transformer chatbot.
//!
//! Client nodes train a shared encoder-decoder model on conversation pairs
//! that never leave them; a combiner averages the returned weights by data
//! size and folds each round's average into a running mean. Everything runs
//! on a small tape-based autograd over dense `f32`/`f64` tensors.
//!
//! The guide in `book/` walks through each module with runnable listings.

pub mod autograd;
pub mod chat;
pub mod client;
pub mod combiner;
pub mod data;
pub mod kv;
pub mod manifest;
pub mod metrics;
pub mod optim;
pub mod protocol;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod transformer;
pub mod weights;
