//! Entity candidate retrieval: linker output files, BM25 over entity
//! descriptions, exact dense retrieval and few-shot generative retrieval.

mod bm25;
mod dense;
mod generative;
mod linked;

pub use crate::head::CandidateSet;
pub use bm25::{
    bm25_build, bm25_build_with, bm25_retrieve, bm25_scores, tokenize, Bm25EntityIndex, Bm25Params,
};
pub use dense::{dense_retrieve, read_dense_queries};
pub use generative::{
    generative_retrieve, parse_completion, render_prompt, resolve_names, ChatClient,
    GenerativeClientConfig, GenerativeOutcome, DEFAULT_PROMPT_TEMPLATE, QUERY_PLACEHOLDER,
};
pub use linked::{load_linked, read_linked, write_candidates, LinkedCandidates};

/// Default candidate depth for the BM25 and dense strategies.
pub const DEFAULT_K: usize = 20;
