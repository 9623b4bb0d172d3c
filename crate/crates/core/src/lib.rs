//! Duty-distinct chain-of-thought (DDCoT) reasoning for multimodal
//! multiple-choice questions.
//!
//! The engine splits a question into sub-questions, marks the ones that
//! cannot be answered without the image as `Uncertain`, routes exactly those
//! to a visual question answering backend, and then asks the language model
//! to reason jointly over the (possibly wrong) supplementary facts before
//! selecting an answer.
//!
//! Besides the orchestration engine the crate ships a ScienceQA loader, an
//! accuracy/BLEU/ROUGE evaluation harness and a small numerical
//! implementation of rationale-compressed visual embedding and deep-layer
//! prompting with gradient verification.

pub mod backends;
pub mod cli;
pub mod dataset;
pub mod eval;
pub mod model;
pub mod parsing;
pub mod pipeline;
pub mod prompting;
pub mod rcve;
pub mod selftest;

pub use model::{
    ErrorTag, ImageRef, Prediction, Problem, Rationale, Split, Stage, SubAnswer, SubQA, Subject,
};
