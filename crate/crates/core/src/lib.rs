//! Risk-averse MPC path planning for a legged robot: a two-phase model
//! predictive controller whose collision radii are inflated by a learned
//! prediction of the state-estimation covariance.
//!
//! Everything numeric is generic over [`scalar::Real`] (`f32` or `f64`).
//! The aliases below fix the scalar to `f64`, which is what the command line
//! tool uses.

pub mod covpred;
pub mod geometry;
pub mod linalg;
pub mod mpc;
pub mod nlp;
pub mod perception;
pub mod qp;
pub mod scalar;
pub mod simcore;
pub mod spline;
pub mod viosim;

pub type State2 = geometry::State2<f64>;
pub type State3 = geometry::State3<f64>;
pub type Control2 = geometry::Control2<f64>;
pub type Control3 = geometry::Control3<f64>;
pub type Covariance2 = geometry::Covariance2<f64>;
pub type Obstacle = geometry::Obstacle<f64>;
pub type RobotGeometry = geometry::RobotGeometry<f64>;
pub type PlannerConfig = mpc::PlannerConfig<f64>;
pub type TrackerConfig = mpc::TrackerConfig<f64>;
pub type Planner = mpc::Planner<f64>;
pub type Tracker = mpc::Tracker<f64>;
pub type NlpSolution = nlp::NlpSolution<f64>;
pub type CameraModel = perception::CameraModel<f64>;
pub type BodyPose = perception::BodyPose<f64>;
pub type Model = covpred::Model<f64>;
pub type Dataset = viosim::Dataset<f64>;
pub type GenConfig = viosim::GenConfig<f64>;
pub type EkfParams = viosim::EkfParams<f64>;
pub type Scenario = simcore::Scenario<f64>;
pub type EpisodeLog = simcore::EpisodeLog<f64>;

/// Single-precision variants.
pub mod f32 {
    pub type State2 = crate::geometry::State2<f32>;
    pub type State3 = crate::geometry::State3<f32>;
    pub type Covariance2 = crate::geometry::Covariance2<f32>;
    pub type Obstacle = crate::geometry::Obstacle<f32>;
    pub type Planner = crate::mpc::Planner<f32>;
    pub type PlannerConfig = crate::mpc::PlannerConfig<f32>;
    pub type Model = crate::covpred::Model<f32>;
    pub type Scenario = crate::simcore::Scenario<f32>;
}
