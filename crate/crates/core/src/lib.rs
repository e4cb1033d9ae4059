//! Anytime sampling-based motion planning with learned stopping policies.
//!
//! The crate records performance profiles of RRT* and PRM* on 2D
//! workspaces, normalizes them against an (optionally learned) estimate of
//! the optimal path length, and fits stopping policies that trade path
//! quality against planning time under the utility `w·q − (1 − w)·t`.

pub mod envgen;
pub mod error;
pub mod experiment;
pub mod geom;
pub mod metareason;
pub mod nn;
pub mod planner;
pub mod predictor;
pub mod profile;
pub mod seed;

pub use error::{Error, Result};
pub use geom::{Config, LocalPlanner, Obstacle, Path, RobotShape, Workspace};
pub use planner::{PlannerKind, PlannerParams, PlannerState};
pub use profile::{Action, LabeledProfile, NormalizedProfile, RawProfile, UtilitySpec};

