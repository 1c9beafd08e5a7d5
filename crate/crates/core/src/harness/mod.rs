//! Synthetic data, training, benchmarks, partition-map export and the
//! self-test suite behind the `quadscan` command line.

pub mod bench;
pub mod data;
pub mod export;
pub mod selftest;
pub mod train;
