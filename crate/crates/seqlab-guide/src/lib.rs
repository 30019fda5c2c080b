//! mdbook cannot run book snippets as tests, so each chapter of `book/src`
//! is included here as module documentation and `cargo test --doc` checks
//! every ```rust fence. One module per chapter keeps failures traceable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
