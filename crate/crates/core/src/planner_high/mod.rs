//! Centralized viewpoint layer: assignment, tracking feasibility sets and
//! next-best-view placement.

pub mod assignment;
pub mod coarse;
pub mod feasibility;
pub mod nbv;

pub use assignment::{hungarian, solve_assignment, solve_assignment_relaxed, AssignmentResult};
pub use coarse::{CoarseModel, ReachRegion};
pub use feasibility::{
    feasibility_ellipsoid, jensen_inner_bound, jensen_log_bound, normalized_radius_sq, FeasibilityEllipsoid,
};
pub use nbv::{default_separation, solve_nbv, NbvParams, NbvSolution, TrackConstraint, Viewpoint};
