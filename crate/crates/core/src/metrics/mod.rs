//! Exact regret and communication accounting.

mod comm;
mod regret;

pub use comm::{verify_comm_bounds, BoundParams, BoundVerdict, CommLedger, CommRow};
pub use regret::{
    estimate_bayes_regret, record_mmdp_regret, record_parallel_regret, BayesEstimate, MmdpOracle, MmdpRegretLedger,
    MmdpRegretRow, ParallelOracle, RegretLedger, RegretRow, REGRET_FLOOR,
};
