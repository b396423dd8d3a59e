//! Budgeted annotation-subset selection that trades language-model
//! uncertainty against embedding diversity with a conditional DPP, plus
//! test-time demonstration retrieval from the selected subset.
//!
//! The pipeline is: load a [`pool_io::CandidatePool`], compute reciprocal
//! perplexity scores ([`scoring`]), build the weighted kernel ([`kernel`]),
//! run greedy MAP ([`map_greedy`]) through [`select::select`], then retrieve
//! and order demonstrations for each query ([`retrieval`]).

pub mod baselines;
pub mod cli;
pub mod error;
pub mod kernel;
pub mod map_greedy;
pub mod oracle;
pub mod par;
pub mod pool_io;
pub mod retrieval;
pub mod scoring;
pub mod select;
pub mod sweep;
pub mod template;

pub use error::{Error, Result};
pub use pool_io::{CandidateItem, CandidatePool, Method, SelectionManifest};
pub use scoring::ScoreVector;
pub use select::{select, SelectParams};
