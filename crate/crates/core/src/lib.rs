pub mod checkpoint;
pub mod dataset;
pub mod domain;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod noise;
pub mod rawfile;
pub mod report;
pub mod seed;
pub mod synthdata;
pub mod train;
pub mod warp;

pub use domain::{normalize_intensity, validate_pair, DatasetSplit, DeformationField, Image, SamplePair};
pub use error::{Error, Result};
