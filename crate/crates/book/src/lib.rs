//! Doctest harness for the guide. Each chapter of `book/src` becomes the
//! documentation of one module, so `cargo test --doc` compiles and runs
//! every code block and a failure names the chapter it came from.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/encoder.md")]
pub mod encoder {}

#[doc = include_str!("../../../book/src/objective.md")]
pub mod objective {}

#[doc = include_str!("../../../book/src/federation.md")]
pub mod federation {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
