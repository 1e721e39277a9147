//! Out-of-boundary view synthesis for warping-based video stabilization.
//!
//! Each frame's canvas is grown by aligning neighboring frames onto it: a
//! grid-homography warp first, then a flow refinement whose out-of-boundary
//! part is filled by anchored affinity propagation. A simple vertex-smoothing
//! stabilizer samples the expanded canvases, so fewer holes need cropping.

pub mod ablation;
pub mod affinity;
pub mod coarse;
pub mod config;
pub mod dense_flow;
pub mod distance;
pub mod expand;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod raster;
pub mod reverse;
pub mod stabilizer;
pub mod synth;
pub mod track;

pub use raster::{
    default_pad, pad_frame, sobel_edges, Canvas, EdgeMap, FlowField, Frame, GrayImage, Mask,
    RasterError, Rect,
};
