#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod encoder;
pub mod nli;
pub mod normalize;
pub mod persist;
pub mod tasks;
pub mod tensor;
pub mod tsdae;
