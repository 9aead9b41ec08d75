//! Experiment runner: configuration, pipelines, manifests and the self-test.

// `!(a > b)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod manifest;
pub mod phantom;
pub mod run;
pub mod selftest;
