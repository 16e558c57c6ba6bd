//! Volumetric stereo matching on a small reverse-mode tensor engine.
//!
//! The network encodes both views with a shared feature pyramid, correlates
//! them into a quarter-resolution cost volume, aggregates it with an
//! image-guided 3D hourglass and regresses disparity by top-k soft-argmax
//! followed by learned superpixel upsampling.

mod error;

pub mod aggregation;
pub mod config;
pub mod conv;
pub mod cost_volume;
pub mod data;
pub mod features;
pub mod gce;
pub mod gradcheck;
pub mod io;
pub mod graph;
pub mod loss;
pub mod model;
pub mod neighborhood;
pub mod optim;
pub mod params;
pub mod regression;
pub mod snapshot;
pub mod tensor;
pub mod train;
pub mod verify;

pub use config::{AggBaseline, Config, GceMode, StereoConfig};
pub use data::StereoSample;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::StereoModel;
pub use params::ParamStore;
pub use regression::DisparityMap;
pub use tensor::Tensor;
