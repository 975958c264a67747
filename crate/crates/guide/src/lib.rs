//! The book chapters under `book/src`, pulled in as doc comments so that
//! `cargo test` compiles and runs every snippet against the current library.
//! Each chapter gets its own module, which keeps failures traceable to a file.

#[doc = include_str!("../../../book/src/intro.md")]
pub mod intro {}
#[doc = include_str!("../../../book/src/designs.md")]
pub mod designs {}
#[doc = include_str!("../../../book/src/levy.md")]
pub mod levy {}
#[doc = include_str!("../../../book/src/bounds.md")]
pub mod bounds {}
#[doc = include_str!("../../../book/src/bootstrap.md")]
pub mod bootstrap {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
