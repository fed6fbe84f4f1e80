//! Anticipatory human-aware navigation and collaborative furniture carrying
//! driven by semantic feedback from a simulated smart edge sensor network.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: SE(2) poses, polygons, grids and ray casting.
//! * [`world`]: the ground-truth simulator (robot, humans, furniture).
//! * [`sensors`]: edge sensor nodes and the lossy delivery channel.
//! * [`perception`]: contour corner extraction, planar pose fitting and grasp geometry.
//! * [`fusion`]: the backend scene model with Kalman person and object tracks.
//! * [`nav`]: virtual person point clouds, layered cost maps, lidar and A*.
//! * [`task`]: pickup anticipation, compliant carrying and the task state machine.
//! * [`experiment`]: scenario files, the closed-loop runner and reports.

pub mod error;
pub mod experiment;
pub mod model;
pub mod nav;
pub mod perception;
pub mod sensors;
pub mod task;
pub mod world;
pub mod fusion;
pub mod geometry;

pub use error::{Error, Result};
pub use geometry::{angle_diff, wrap_angle, Grid2, Point2, Polygon2, Pose2, Velocity2};
