//! Robocentric visual-inertial odometry.
//!
//! A sliding-window EKF that estimates motion with respect to a moving local
//! IMU frame of reference: the global frame and the local gravity are part of
//! the state, relative poses are kept in a sliding window via stochastic
//! cloning, landmarks are fused through an inverse-depth measurement model,
//! and the frame of reference is shifted to the newest IMU frame at every
//! image time through a composition step.
//!
//! The crate also ships an observability-analysis toolkit, a synthetic
//! camera/IMU simulator, and a Monte Carlo evaluation harness (RMSE/NEES).

pub mod composition;
pub mod config;
pub mod eval;
pub mod io;
pub mod observability;
pub mod propagation;
pub mod sim;
pub mod so3;
pub mod state;
pub mod update;

pub use config::RunConfig;
pub use state::FilterState;

/// 3-vector of f64.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 2-vector of f64.
pub type Vec2 = nalgebra::Vector2<f64>;
/// 3x3 matrix of f64.
pub type Mat3 = nalgebra::Matrix3<f64>;
/// Dynamically sized matrix of f64.
pub type DMat = nalgebra::DMatrix<f64>;
/// Dynamically sized vector of f64.
pub type DVec = nalgebra::DVector<f64>;

/// Dimension of the robocentric error state (global pose + gravity + IMU state).
pub const ROBO_DIM: usize = 24;
/// Error-state dimension of one relative pose in the sliding window.
pub const POSE_DIM: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty IMU sample batch")]
    EmptyImuBatch,
    #[error("IMU timestamps are not strictly increasing")]
    NonMonotoneTimestamps,
    #[error("small-angle constructor called with |dtheta| = {0} >= pi")]
    SmallAngleTooLarge(f64),
    #[error("no IMU samples provided for initialization")]
    NoInitSamples,
    #[error("mean accelerometer norm {0} is below half the gravity magnitude; start is not stationary")]
    NotStationary(f64),
    #[error("sliding window is empty")]
    EmptyWindow,
    #[error("frame index {index} outside the current window span of {frames} frames")]
    IndexOutOfWindow { index: usize, frames: usize },
    #[error("feature track has {0} usable observations; at least 2 are required")]
    TooFewObservations(usize),
    #[error("degenerate triangulation geometry: normal equations singular after column regularization")]
    DegenerateGeometry,
    #[error("all measurement rows were dropped for this feature")]
    AllRowsDropped,
    #[error("residual has {rows} rows; nullspace projection needs at least {needed}")]
    TooFewRows { rows: usize, needed: usize },
    #[error("innovation covariance is not invertible")]
    SingularInnovation,
    #[error("trajectory history too sparse for quadrature ({0} samples)")]
    HistoryTooSparse(usize),
    #[error("no features visible for more than {0:.1} s; scene and trajectory are inconsistent")]
    NoVisibleFeatures(f64),
    #[error("timestamp gap of {0:.3} s between consecutive images exceeds 0.5 s")]
    TimestampGap(f64),
    #[error("fewer than 2 matched poses between estimate and ground truth")]
    TooFewMatchedPoses,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed row in {file}: {msg}")]
    MalformedRow { file: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
