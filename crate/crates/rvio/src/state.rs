//! Robocentric state container: global pose + local gravity, IMU state,
//! sliding window of relative poses, and the jointly maintained covariance.

use crate::propagation::ImuSample;
use crate::so3::UnitQuat;
use crate::{DMat, Error, Mat3, Result, Vec3, POSE_DIM, ROBO_DIM};

/// Error-state block offsets within the robocentric state.
pub mod idx {
    /// Global orientation error δθ_G.
    pub const THETA_G: usize = 0;
    /// Global position error p̃_G.
    pub const P_G: usize = 3;
    /// Local gravity error g̃.
    pub const GRAVITY: usize = 6;
    /// Relative orientation error δθ_I.
    pub const THETA_I: usize = 9;
    /// Relative position error p̃_I.
    pub const P_I: usize = 12;
    /// Velocity error ṽ.
    pub const VEL: usize = 15;
    /// Gyroscope bias error b̃_g.
    pub const BG: usize = 18;
    /// Accelerometer bias error b̃_a.
    pub const BA: usize = 21;
}

/// Motion information of the starting frame, expressed in the current local
/// frame of reference: rotation G→R_k, position of G in R_k, local gravity.
#[derive(Debug, Clone)]
pub struct GlobalState {
    pub q_global: UnitQuat,
    pub p_global: Vec3,
    pub gravity_local: Vec3,
}

/// IMU state relative to the local frame of reference R_k.
///
/// `v` is the local velocity expressed in the current IMU frame.
#[derive(Debug, Clone)]
pub struct ImuState {
    pub q_rel: UnitQuat,
    pub p_rel: Vec3,
    pub v: Vec3,
    pub b_g: Vec3,
    pub b_a: Vec3,
}

/// Relative pose between two consecutive frames of reference.
#[derive(Debug, Clone)]
pub struct RelativePose {
    pub q: UnitQuat,
    pub p: Vec3,
}

/// Sliding window of relative poses, oldest first.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    pub poses: Vec<RelativePose>,
    pub n_max: usize,
}

impl SlidingWindow {
    pub fn new(n_max: usize) -> Self {
        SlidingWindow { poses: Vec::new(), n_max }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Error-state dimension contributed by the window.
    pub fn error_dim(&self) -> usize {
        POSE_DIM * self.poses.len()
    }
}

/// Camera-to-IMU calibration `{q_cam_imu = ^C_I q, p_imu_in_cam = ^C p_I}`.
#[derive(Debug, Clone)]
pub struct CameraImuExtrinsics {
    pub q_cam_imu: UnitQuat,
    pub p_imu_in_cam: Vec3,
}

impl CameraImuExtrinsics {
    pub fn identity() -> Self {
        CameraImuExtrinsics { q_cam_imu: UnitQuat::identity(), p_imu_in_cam: Vec3::zeros() }
    }

    /// Position of the camera in the IMU frame, `^I p_C = −C(^C_I q)ᵀ ^C p_I`.
    pub fn p_cam_in_imu(&self) -> Vec3 {
        -(self.q_cam_imu.to_matrix().transpose() * self.p_imu_in_cam)
    }
}

/// Continuous-time IMU noise densities plus image noise.
///
/// `sigma_im` is in normalized image coordinates (pixel sigma divided by the
/// focal length at ingestion).
#[derive(Debug, Clone)]
pub struct NoiseConfig {
    pub sigma_g: f64,
    pub sigma_wg: f64,
    pub sigma_a: f64,
    pub sigma_wa: f64,
    pub sigma_im: f64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_g, self.sigma_wg, self.sigma_a, self.sigma_wa, self.sigma_im];
        if all.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("noise densities must be strictly positive".into()));
        }
        Ok(())
    }
}

/// Filter thresholds and capacities. Defaults match the documented config.
#[derive(Debug, Clone)]
pub struct FilterParams {
    /// Maximum number of relative poses kept in the sliding window.
    pub n_max: usize,
    pub gravity_mag: f64,
    /// Principal-point degeneracy threshold, normalized units.
    pub eps_pp: f64,
    /// Low-parallax threshold on the chained camera baselines, meters.
    pub eps_par: f64,
    /// Significance level of the Mahalanobis gate.
    pub chi2_alpha: f64,
    pub gn_step_tol: f64,
    pub gn_max_iters: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            n_max: 20,
            gravity_mag: 9.81,
            eps_pp: 1e-3,
            eps_par: 0.01,
            chi2_alpha: 0.05,
            gn_step_tol: 1e-8,
            gn_max_iters: 10,
        }
    }
}

/// Full filter state with its error-state covariance.
///
/// Error-state ordering is `[δθ_G, p̃_G, g̃, δθ_I, p̃_I, ṽ, b̃_g, b̃_a]`
/// followed by the window blocks oldest→newest, 6 each.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub global: GlobalState,
    pub imu: ImuState,
    pub window: SlidingWindow,
    pub cov: DMat,
    /// Image time-step index.
    pub epoch: usize,
    /// Time of the last processed IMU sample, seconds.
    pub clock: f64,
}

impl FilterState {
    /// Initializes from stationary IMU samples collected over
    /// `window_seconds`: poses to identity/zero with zero covariance, local
    /// gravity from the rescaled mean accelerometer sample, biases from the
    /// stationary means, and gravity/bias covariances `ΔT σ² I`.
    pub fn initialize(
        samples: &[ImuSample],
        window_seconds: f64,
        params: &FilterParams,
        noise: &NoiseConfig,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::NoInitSamples);
        }
        let n = samples.len() as f64;
        let mean_gyro: Vec3 = samples.iter().map(|s| s.gyro).sum::<Vec3>() / n;
        let mean_accel: Vec3 = samples.iter().map(|s| s.accel).sum::<Vec3>() / n;
        let accel_norm = mean_accel.norm();
        if accel_norm < 0.5 * params.gravity_mag {
            return Err(Error::NotStationary(accel_norm));
        }
        let gravity_local = mean_accel * (params.gravity_mag / accel_norm);
        let b_a = mean_accel - gravity_local;

        let mut cov = DMat::zeros(ROBO_DIM, ROBO_DIM);
        let dt = window_seconds;
        for i in 0..3 {
            cov[(idx::GRAVITY + i, idx::GRAVITY + i)] = dt * noise.sigma_a * noise.sigma_a;
            cov[(idx::BG + i, idx::BG + i)] = dt * noise.sigma_wg * noise.sigma_wg;
            cov[(idx::BA + i, idx::BA + i)] = dt * noise.sigma_wa * noise.sigma_wa;
        }

        Ok(FilterState {
            global: GlobalState {
                q_global: UnitQuat::identity(),
                p_global: Vec3::zeros(),
                gravity_local,
            },
            imu: ImuState {
                q_rel: UnitQuat::identity(),
                p_rel: Vec3::zeros(),
                v: Vec3::zeros(),
                b_g: mean_gyro,
                b_a,
            },
            window: SlidingWindow::new(params.n_max),
            cov,
            epoch: 0,
            clock: samples.last().map(|s| s.t).unwrap_or(0.0),
        })
    }

    /// World-frame readout: rotation R_k→G and position of R_k in G.
    pub fn global_pose(&self) -> (UnitQuat, Vec3) {
        let q = self.global.q_global.inverse();
        let p = -(self.global.q_global.to_matrix().transpose() * self.global.p_global);
        (q, p)
    }

    /// Total error-state dimension, `24 + 6 · window length`.
    pub fn error_dim(&self) -> usize {
        ROBO_DIM + self.window.error_dim()
    }

    /// Drops the oldest relative pose and its covariance rows/columns.
    pub fn marginalize_oldest(&mut self) -> Result<()> {
        if self.window.is_empty() {
            return Err(Error::EmptyWindow);
        }
        self.window.poses.remove(0);
        let cov = std::mem::replace(&mut self.cov, DMat::zeros(0, 0));
        self.cov = cov.remove_rows(ROBO_DIM, POSE_DIM).remove_columns(ROBO_DIM, POSE_DIM);
        Ok(())
    }

    /// Restores exact symmetry, `P ← (P + Pᵀ)/2`.
    pub fn symmetrize_cov(&mut self) {
        let t = self.cov.transpose();
        self.cov += t;
        self.cov *= 0.5;
    }

    /// Smallest eigenvalue of the (symmetrized) covariance.
    pub fn min_cov_eigenvalue(&self) -> f64 {
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }

    /// 3×3 covariance marginal starting at error-state offset `off`.
    pub fn marginal3(&self, off: usize) -> Mat3 {
        self.cov.fixed_view::<3, 3>(off, off).clone_owned()
    }
}
