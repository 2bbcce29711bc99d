// Negated float comparisons (`!(v > 0.0)`) are used on purpose to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod cli;
pub mod error;
pub mod lagrange;
pub mod metrics;
pub mod network;
pub mod recovery;
pub mod sparse;
pub mod synthgen;
pub mod table;
pub mod tuning;
