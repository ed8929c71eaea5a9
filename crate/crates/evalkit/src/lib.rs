//! Evaluation protocol, experiment orchestration and reporting for the
//! `udalab` domain-adaptation robustness lab.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod metrics;
pub mod plot;
pub mod record;
pub mod report;
pub mod runner;
pub mod sanity;
