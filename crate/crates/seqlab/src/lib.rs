//! seqlab: a desk-scale laboratory for semi-supervised sequence
//! transduction with a shared CTC + attention model.
//!
//! The crate bundles everything the experiments need, built from scratch
//! on a small reverse-mode autodiff engine: a tiny transformer
//! encoder-decoder over synthetic multimodal frame streams, exact CTC
//! (loss, greedy decoding, prefix scoring), joint CTC-attention beam
//! search, a teacher-student self-training loop with CTC-driven teacher
//! forcing and mixed-mode sampling, and an evaluation/benchmark CLI.
//!
//! The `book/` directory at the repository root is an mdbook guide whose
//! code snippets compile as doc-tests (see the `seqlab-guide` crate).

pub mod autodiff;
mod cli;
pub mod config;
pub mod ctc;
pub mod data;
pub mod decode;
pub mod eval;
pub mod model;
pub mod parallel;
pub mod real;
pub mod rng;
pub mod train;

/// CLI entry point; returns the process exit code.
pub fn run_cli() -> i32 {
    let argv: Vec<String> = std::env::args().collect();
    cli::run(&argv)
}
