// `!(x > 0.0)` style comparisons are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod curvature;
pub mod data;
pub mod evaluation;
pub mod experiments;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod selftest;
pub mod toyviz;
pub mod updates;
