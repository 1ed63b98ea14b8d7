//! Verification, cost accounting, guidance and experiment reporting.

pub mod bootstrap;
pub mod check;
pub mod cost;
pub mod describe;
pub mod experiment;
pub mod recommend;
