//! Oriented object detection with task-wise sampling convolutions.

pub mod autodiff;
pub mod config;
pub mod cs_conv;
pub mod data;
pub mod geometry;
pub mod label_assign;
pub mod losses;
pub mod model;
pub mod ls_conv;
pub mod postprocess;
pub mod sampling;
pub mod train;
