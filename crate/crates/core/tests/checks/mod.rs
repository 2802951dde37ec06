//! Check routines whose results the suites assert on and the acceptance run
//! reports.

#![allow(dead_code)]

pub mod autodiff;
pub mod cli;
pub mod numerics;
pub mod sampler;
