mod binio;
pub mod candidates;
pub mod cli;
pub mod error;
pub mod eval;
pub mod head;
pub mod index;
pub mod kb;
pub mod sparse;
pub mod synth;
pub mod train;
