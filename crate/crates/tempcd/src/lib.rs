//! Temporal collection-distribution decoder for referring video object
//! segmentation, trained and verified on a synthetic moving-shapes benchmark.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod episodes;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
