//! Error correction for LLM-generated SQL.
//!
//! A generated query is executed against its reference database and
//! classified. Failures go through a diagnose, prescribe and treat prompt
//! loop: the LLM names the error types, writes a reason and fixing
//! instruction informed by similar labeled cases retrieved from a knowledge
//! base, then rewrites the query.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod case;
pub mod casefile;
pub mod config;
pub mod embedding;
pub mod error;
pub mod http;
pub mod kb;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod spider;
pub mod sqlrun;
pub mod sqltext;

pub use error::{Error, Result};
