//! Multi-message private computation over replicated servers.
//!
//! A user wants P linearly independent combinations of K files that are
//! replicated, together with M−K derived combinations, on N non-colluding
//! servers. The query plan spreads signed symbol sums over all subsets of
//! messages, compresses each stage with an MDS code, and keeps every server's
//! view independent of which combinations were demanded.
//!
//! The crate is organised as a pipeline:
//! relabel the library around the demand ([`model`]), lay out indices and
//! signs ([`planner`]), compress stages ([`coding`]), answer and decode
//! ([`protocol`]), then verify structure and privacy ([`audit`]) and compare
//! against closed-form rates ([`analytics`]).

pub mod analytics;
pub mod audit;
pub mod coding;
pub mod combin;
pub mod gf;
pub mod model;
pub mod planner;
pub mod protocol;
