//! Test-driven synthesis of navigation controllers for a differential-drive
//! robot on 2D occupancy-grid maps.
//!
//! The pipeline runs in stages:
//!
//! - [`occgrid`] and [`mapopt`] turn a raw map image into an occupancy grid
//!   by grid search over binarization polarity, cleanup strength and
//!   inflation radius.
//! - [`planner`] computes A* reference routes and the path metrics used to
//!   score preprocessing candidates.
//! - [`sim2d`] runs differential-drive episodes with ray-cast range sensing.
//! - [`harness`] hosts candidate controllers as child processes speaking a
//!   newline-delimited JSON protocol.
//! - [`verify`] runs the static / unit / end-to-end check tiers and produces
//!   the diagnostic report.
//! - [`agent`] drives the generate / test / edit / update-rules repair loop
//!   against a pluggable text-generation backend.
//! - [`runner`] orchestrates multi-run experiments and computes success-rate
//!   and cumulative-success metrics.

pub mod agent;
pub mod harness;
pub mod mapopt;
pub mod occgrid;
pub mod planner;
pub mod runner;
pub mod sim2d;
pub mod verify;

pub use occgrid::{OccupancyGrid, Pixel};
