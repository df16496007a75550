//! Compiles every chapter of the guide in `book/` as rustdoc, so
//! `cargo test` runs each Rust listing. One module per chapter keeps
//! failures traceable to their file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/tokenizer.md")]
pub mod tokenizer {}
#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/federation.md")]
pub mod federation {}
#[doc = include_str!("../../../book/src/wire.md")]
pub mod wire {}
#[doc = include_str!("../../../book/src/chat-service.md")]
pub mod chat_service {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
