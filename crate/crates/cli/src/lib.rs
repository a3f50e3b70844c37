//! Configuration, weight files, invariant checks, FLOP estimates and
//! scaling benchmarks for the `dydila` command-line tool.

pub mod bench;
pub mod check;
pub mod config;
pub mod flops;
pub mod io;
pub mod params;
pub mod run;
pub mod weights;
