// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod balancer;
pub mod cache;
pub mod config;
pub mod costmodel;
pub mod engine;
pub mod experiments;
pub mod metrics;
pub mod partition;
pub mod types;
pub mod workload;
