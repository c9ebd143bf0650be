//! Reference implementations used as test oracles.
//!
//! Everything here is written for clarity, not speed, and deliberately
//! shares no code paths with `moesplat-core` beyond its plain data types;
//! `gradcheck` drives core's backward passes against these oracles.

pub mod composite;
pub mod fd;
pub mod gradcheck;
pub mod metrics;
pub mod random;
pub mod recurrence;
