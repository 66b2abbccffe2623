//! Robust multi-agent safety filtering with learned disturbance models.
//!
//! The pipeline: [`mvg`] learns coupled dynamics disturbances online with a
//! matrix-variate Gaussian process; [`bounds`] converts its confidence
//! ellipsoids into polytopes and scalar norm bounds; [`cbf`] builds
//! control-barrier-condition coefficients that hold for every disturbance in
//! the polytope; [`robustqp`] solves the dualized robust quadratic program
//! picking the minimally-invasive safe control; [`sim`] runs randomized
//! multi-agent campaigns exercising the whole stack.

pub mod bounds;
pub mod cbf;
pub mod dynamics;
pub mod mvg;
pub mod robustqp;
pub mod sim;

pub use dynamics::{
    step_agent, step_robot, extract_agent_disturbance, extract_robot_disturbance, AgentModel,
    AgentState, ConstantVelocity, Disturbance, DragIntegrator, DynamicsError, RobotDynamics,
};
pub use mvg::{
    kernel_eval, train, DisturbancePosterior, KernelParams, ModelFile, MvgError, MvgModel,
    TrainConfig, TrainOutcome, TrainingBatch,
};
