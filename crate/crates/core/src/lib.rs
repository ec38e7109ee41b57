//! Cooperative optimistic LSVI for parallel linear MDPs and multi-agent MDPs,
//! with exact oracles and regret/communication ledgers. See the guide in `book/`.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod coop_mmdp;
pub mod coop_parallel;
pub mod env;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod rng;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/covariance.md")]
    mod covariance {}
    #[doc = include_str!("../../../book/src/parallel.md")]
    mod parallel {}
    #[doc = include_str!("../../../book/src/mmdp.md")]
    mod mmdp {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
