//! Multi-agent group sequence policy optimization for structured report
//! generation, with a synthetic chest-report environment whose rewards are
//! exactly computable.

pub mod evalanalysis;
pub mod magspo;
pub mod policy;
pub mod rewards;
pub mod synthenv;
pub mod textcore;
pub mod trainer;
pub mod workflow;
