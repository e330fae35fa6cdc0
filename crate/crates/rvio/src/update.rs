//! Inverse-depth measurement update: Gauss-Newton triangulation, measurement
//! Jacobians with the dense window connection, Givens nullspace projection,
//! Mahalanobis gating, QR-compressed EKF update, and stochastic-cloning
//! state augmentation.

use crate::so3::{skew, small_angle_quat, UnitQuat};
use crate::state::{idx, CameraImuExtrinsics, FilterParams, FilterState, RelativePose, SlidingWindow};
use crate::{DMat, DVec, Error, Mat3, Result, Vec2, Vec3, POSE_DIM, ROBO_DIM};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Per-feature track of normalized image observations.
///
/// `observations` pairs a frame index with the measurement; indices must be
/// strictly increasing and within the current window span when processed.
#[derive(Debug, Clone)]
pub struct FeatureTrack {
    pub feature_id: u64,
    pub observations: Vec<(usize, Vec2)>,
}

/// Landmark in inverse-depth form, anchored at its first observing camera
/// frame: elevation φ, azimuth ψ, inverse depth ρ (ρ = 0 is a point at
/// infinity).
#[derive(Debug, Clone, Copy)]
pub struct InverseDepthLandmark {
    pub phi: f64,
    pub psi: f64,
    pub rho: f64,
}

impl InverseDepthLandmark {
    /// Directional vector e(φ, ψ) in the anchor camera frame.
    pub fn direction(&self) -> Vec3 {
        Vec3::new(
            self.phi.cos() * self.psi.sin(),
            self.phi.sin(),
            self.phi.cos() * self.psi.cos(),
        )
    }
}

/// Residual stack over the full error state after landmark elimination.
/// Columns over the 24-dim robocentric block are zero by construction.
#[derive(Debug, Clone)]
pub struct StackedResidual {
    pub r: DVec,
    pub h_x: DMat,
    /// Scalar measurement noise variance σ_im².
    pub noise_var: f64,
    pub dof: usize,
}

/// Rotations and translations of every window frame relative to the oldest
/// frame in the span, precomputed once per update epoch.
///
/// Slot `s` (0 ..= window length) is the historical frame of reference the
/// window poses chain through; the last slot is the current frame.
pub struct CameraChain {
    /// Rotation from slot 0 to slot s.
    rot_from_base: Vec<Mat3>,
    /// Position of slot s in the slot-0 frame.
    pos_in_base: Vec<Vec3>,
    c_ci: Mat3,
    p_cam_in_imu: Vec3,
    p_imu_in_cam: Vec3,
}

impl CameraChain {
    pub fn new(window: &SlidingWindow, extrinsics: &CameraImuExtrinsics) -> Self {
        let n = window.len() + 1;
        let mut rot_from_base = Vec::with_capacity(n);
        let mut pos_in_base = Vec::with_capacity(n);
        rot_from_base.push(Mat3::identity());
        pos_in_base.push(Vec3::zeros());
        for pose in &window.poses {
            let prev_rot = *rot_from_base.last().unwrap();
            let prev_pos = *pos_in_base.last().unwrap();
            pos_in_base.push(prev_pos + prev_rot.transpose() * pose.p);
            rot_from_base.push(pose.q.to_matrix() * prev_rot);
        }
        CameraChain {
            rot_from_base,
            pos_in_base,
            c_ci: extrinsics.q_cam_imu.to_matrix(),
            p_cam_in_imu: extrinsics.p_cam_in_imu(),
            p_imu_in_cam: extrinsics.p_imu_in_cam,
        }
    }

    pub fn frames(&self) -> usize {
        self.rot_from_base.len()
    }

    /// IMU-frame rotation from slot `from` to slot `to`.
    fn imu_rotation(&self, from: usize, to: usize) -> Mat3 {
        self.rot_from_base[to] * self.rot_from_base[from].transpose()
    }

    /// Position of slot `of` expressed in the frame of slot `in_frame`.
    fn imu_position(&self, of: usize, in_frame: usize) -> Vec3 {
        self.rot_from_base[in_frame] * (self.pos_in_base[of] - self.pos_in_base[in_frame])
    }

    /// Camera-frame relative pose: rotation C_first → C_i and position of
    /// C_first in C_i.
    pub fn camera_pair(&self, first: usize, i: usize) -> Result<(Mat3, Vec3)> {
        if first > i || i >= self.frames() {
            return Err(Error::IndexOutOfWindow { index: i.max(first), frames: self.frames() });
        }
        let rot_imu = self.imu_rotation(first, i);
        let p_first_in_i = self.imu_position(first, i);
        let rot = self.c_ci * rot_imu * self.c_ci.transpose();
        let p = self.c_ci * rot_imu * self.p_cam_in_imu + self.c_ci * p_first_in_i + self.p_imu_in_cam;
        Ok((rot, p))
    }
}

/// Relative camera pose between two frames of the window span (rotation
/// C_first → C_i and the position of C_first in C_i).
pub fn relative_pose_chain(
    window: &SlidingWindow,
    extrinsics: &CameraImuExtrinsics,
    first: usize,
    i: usize,
) -> Result<(Mat3, Vec3)> {
    CameraChain::new(window, extrinsics).camera_pair(first, i)
}

fn h_vector(chain: &CameraChain, anchor: usize, slot: usize, lm: &InverseDepthLandmark) -> Result<Vec3> {
    let (rot, p) = chain.camera_pair(anchor, slot)?;
    Ok(rot * lm.direction() + p * lm.rho)
}

fn project_h(h: &Vec3) -> Vec2 {
    Vec2::new(h.x / h.z, h.y / h.z)
}

/// ∂(z)/∂(h): the normalized perspective Jacobian.
fn h_projection_jacobian(h: &Vec3) -> nalgebra::Matrix2x3<f64> {
    nalgebra::Matrix2x3::new(1.0, 0.0, -h.x / h.z, 0.0, 1.0, -h.y / h.z) / h.z
}

/// ∂h/∂(φ, ψ, ρ) for one view.
fn h_landmark_jacobian(rot: &Mat3, p: &Vec3, lm: &InverseDepthLandmark) -> Mat3 {
    let (sphi, cphi) = lm.phi.sin_cos();
    let (spsi, cpsi) = lm.psi.sin_cos();
    let de = nalgebra::Matrix3x2::new(
        -sphi * spsi,
        cphi * cpsi,
        cphi,
        0.0,
        -sphi * cpsi,
        -cphi * spsi,
    );
    let left = rot * de;
    Mat3::from_columns(&[left.column(0).into(), left.column(1).into(), *p])
}

/// Gauss-Newton bundle adjustment for one landmark over its track.
///
/// (φ, ψ) start from the bearing of the first measurement, ρ from 0 (point
/// at infinity), iterating the normal equations until the step falls below
/// `gn_step_tol`. Returns the last iterate even when ρ stays near 0 (low
/// parallax). Observations are `(frame slot, normalized measurement)`.
pub fn triangulate(
    observations: &[(usize, Vec2)],
    window: &SlidingWindow,
    extrinsics: &CameraImuExtrinsics,
    params: &FilterParams,
) -> Result<InverseDepthLandmark> {
    let chain = CameraChain::new(window, extrinsics);
    triangulate_with_chain(observations, &chain, params)
}

pub(crate) fn triangulate_with_chain(
    observations: &[(usize, Vec2)],
    chain: &CameraChain,
    params: &FilterParams,
) -> Result<InverseDepthLandmark> {
    if observations.len() < 2 {
        return Err(Error::TooFewObservations(observations.len()));
    }
    let anchor = observations[0].0;
    let z1 = observations[0].1;
    let mut lm = InverseDepthLandmark {
        phi: z1.y.atan2((z1.x * z1.x + 1.0).sqrt()),
        psi: z1.x.atan2(1.0),
        rho: 0.0,
    };

    let pairs: Vec<(Mat3, Vec3)> = observations
        .iter()
        .map(|(slot, _)| chain.camera_pair(anchor, *slot))
        .collect::<Result<_>>()?;

    for _ in 0..params.gn_max_iters {
        let mut a = Mat3::zeros();
        let mut b = Vec3::zeros();
        for ((_, z), (rot, p)) in observations.iter().zip(&pairs) {
            let h = rot * lm.direction() + p * lm.rho;
            if h.z.abs() < 1e-12 {
                continue;
            }
            let jac = h_projection_jacobian(&h) * h_landmark_jacobian(rot, p, &lm);
            let resid = z - project_h(&h);
            a += jac.transpose() * jac;
            b += jac.transpose() * resid;
        }
        let step = match a.cholesky() {
            Some(chol) => chol.solve(&b),
            None => {
                // ρ column degenerate (zero parallax): solve the (φ, ψ)
                // subsystem and keep ρ fixed.
                let a2 = a.fixed_view::<2, 2>(0, 0).clone_owned();
                let b2 = nalgebra::Vector2::new(b.x, b.y);
                match a2.cholesky() {
                    Some(chol2) => {
                        let s = chol2.solve(&b2);
                        Vec3::new(s.x, s.y, 0.0)
                    }
                    None => return Err(Error::DegenerateGeometry),
                }
            }
        };
        lm.phi += step.x;
        lm.psi += step.y;
        lm.rho = (lm.rho + step.z).max(0.0);
        if step.norm() < params.gn_step_tol {
            break;
        }
    }
    Ok(lm)
}

/// Linearized measurement system of one landmark before elimination.
#[derive(Debug, Clone)]
pub struct MeasurementSystem {
    pub r: DVec,
    pub h_x: DMat,
    pub h_lambda: DMat,
    /// All chained baselines below the low-parallax threshold.
    pub low_parallax: bool,
}

/// Builds the stacked residual and Jacobians of one landmark over its track.
///
/// Views whose measurement lies within `eps_pp` of the principal point are
/// dropped (principal-point degeneracy). Columns over the robocentric block
/// are exactly zero; the window blocks chain through every pose between the
/// anchor and each view.
pub fn measurement_jacobians(
    observations: &[(usize, Vec2)],
    landmark: &InverseDepthLandmark,
    window: &SlidingWindow,
    extrinsics: &CameraImuExtrinsics,
    params: &FilterParams,
) -> Result<MeasurementSystem> {
    let chain = CameraChain::new(window, extrinsics);
    measurement_jacobians_with_chain(observations, landmark, &chain, window.len(), params)
}

pub(crate) fn measurement_jacobians_with_chain(
    observations: &[(usize, Vec2)],
    landmark: &InverseDepthLandmark,
    chain: &CameraChain,
    window_len: usize,
    params: &FilterParams,
) -> Result<MeasurementSystem> {
    if observations.len() < 2 {
        return Err(Error::TooFewObservations(observations.len()));
    }
    let anchor = observations[0].0;
    let state_dim = ROBO_DIM + POSE_DIM * window_len;
    let e = landmark.direction();
    let lever = chain.c_ci.transpose() * e + chain.p_cam_in_imu * landmark.rho;

    let mut rows_r: Vec<f64> = Vec::new();
    let mut rows_hx: Vec<DMat> = Vec::new();
    let mut rows_hl: Vec<nalgebra::Matrix2x3<f64>> = Vec::new();
    let mut low_parallax = true;

    for (slot, z) in observations {
        let (rot, p_pair) = chain.camera_pair(anchor, *slot)?;
        if *slot != anchor && p_pair.norm() >= params.eps_par {
            low_parallax = false;
        }
        // Case (ii): measurement at the principal point.
        if z.norm() < params.eps_pp {
            continue;
        }
        let h = rot * e + p_pair * landmark.rho;
        if h.z.abs() < 1e-12 {
            continue;
        }
        let h_p = h_projection_jacobian(&h);
        let resid = z - project_h(&h);

        let mut h_w = DMat::zeros(3, state_dim);
        let chain_rot_imu = chain.imu_rotation(anchor, *slot);
        for m in anchor..*slot {
            // Pose m connects slot m to m+1.
            let p_next_in_anchor = chain.imu_position(m + 1, anchor);
            let bracket = lever - p_next_in_anchor * landmark.rho;
            let g_next = chain.imu_rotation(anchor, m + 1);
            let dtheta = chain.c_ci * chain_rot_imu * skew(&bracket) * g_next.transpose();
            let dp = -(chain.c_ci * chain.imu_rotation(m, *slot)) * landmark.rho;
            let col = ROBO_DIM + POSE_DIM * m;
            h_w.view_mut((0, col), (3, 3)).copy_from(&dtheta);
            h_w.view_mut((0, col + 3), (3, 3)).copy_from(&dp);
        }

        rows_r.push(resid.x);
        rows_r.push(resid.y);
        let h_p_dyn = DMat::from_fn(2, 3, |i, j| h_p[(i, j)]);
        rows_hx.push(h_p_dyn * h_w);
        rows_hl.push(h_p * h_landmark_jacobian(&rot, &p_pair, landmark));
    }

    if rows_r.is_empty() {
        return Err(Error::AllRowsDropped);
    }
    let nrows = rows_r.len();
    let mut r = DVec::zeros(nrows);
    let mut h_x = DMat::zeros(nrows, state_dim);
    let mut h_lambda = DMat::zeros(nrows, 3);
    for (i, block) in rows_hx.iter().enumerate() {
        r[2 * i] = rows_r[2 * i];
        r[2 * i + 1] = rows_r[2 * i + 1];
        h_x.view_mut((2 * i, 0), (2, state_dim)).copy_from(block);
        h_lambda.view_mut((2 * i, 0), (2, 3)).copy_from(&rows_hl[i]);
    }
    Ok(MeasurementSystem { r, h_x, h_lambda, low_parallax })
}

/// Projects the residual to the left nullspace of `H_λ` with Givens
/// rotations. With parallax, all three landmark columns are eliminated
/// (2n−3 rows survive); in the low-parallax branch only the bearing columns
/// are rotated and 2n−2 rows survive.
pub fn nullspace_project(
    r: &DVec,
    h_x: &DMat,
    h_lambda: &DMat,
    parallax_ok: bool,
    sigma_im: f64,
) -> Result<StackedResidual> {
    let rows = r.len();
    if rows < 4 {
        return Err(Error::TooFewRows { rows, needed: 4 });
    }
    let cols_to_zero = if parallax_ok { 3 } else { 2 };
    let mut r = r.clone();
    let mut h_x = h_x.clone();
    let mut h_l = h_lambda.clone();

    for c in 0..cols_to_zero {
        for row in (c + 1)..rows {
            let a = h_l[(c, c)];
            let b = h_l[(row, c)];
            if b == 0.0 {
                continue;
            }
            let rho = a.hypot(b);
            let (cos, sin) = (a / rho, -b / rho);
            givens_rows(&mut h_l, c, row, cos, sin);
            givens_rows(&mut h_x, c, row, cos, sin);
            let (rc, rr) = (r[c], r[row]);
            r[c] = cos * rc - sin * rr;
            r[row] = sin * rc + cos * rr;
        }
    }

    let keep = rows - cols_to_zero;
    Ok(StackedResidual {
        r: r.rows(cols_to_zero, keep).clone_owned(),
        h_x: h_x.rows(cols_to_zero, keep).clone_owned(),
        noise_var: sigma_im * sigma_im,
        dof: keep,
    })
}

fn givens_rows(m: &mut DMat, i: usize, j: usize, cos: f64, sin: f64) {
    for c in 0..m.ncols() {
        let (a, b) = (m[(i, c)], m[(j, c)]);
        m[(i, c)] = cos * a - sin * b;
        m[(j, c)] = sin * a + cos * b;
    }
}

/// Mahalanobis gate: accept iff `rᵀ (H P Hᵀ + R)⁻¹ r ≤ χ²_{dof, 1−α}`.
pub fn mahalanobis_gate(res: &StackedResidual, cov: &DMat, alpha: f64) -> Result<bool> {
    let s = &res.h_x * cov * res.h_x.transpose() + DMat::identity(res.dof, res.dof) * res.noise_var;
    let chol = s.cholesky().ok_or(Error::SingularInnovation)?;
    let d = res.r.dot(&chol.solve(&res.r));
    let threshold = ChiSquared::new(res.dof as f64)
        .map_err(|_| Error::SingularInnovation)?
        .inverse_cdf(1.0 - alpha);
    Ok(d <= threshold)
}

/// Stacks per-landmark residuals into one system (shared noise variance).
pub fn stack_residuals(parts: &[StackedResidual]) -> Option<StackedResidual> {
    let total: usize = parts.iter().map(|p| p.dof).sum();
    if total == 0 {
        return None;
    }
    let cols = parts[0].h_x.ncols();
    let mut r = DVec::zeros(total);
    let mut h = DMat::zeros(total, cols);
    let mut at = 0;
    for p in parts {
        r.rows_mut(at, p.dof).copy_from(&p.r);
        h.view_mut((at, 0), (p.dof, cols)).copy_from(&p.h_x);
        at += p.dof;
    }
    Some(StackedResidual { r, h_x: h, noise_var: parts[0].noise_var, dof: total })
}

/// Thin-QR compression of the stacked system onto the window columns.
/// Skipped when the stack is already smaller than the window error dimension.
pub fn qr_compress(stacked: StackedResidual, window_error_dim: usize) -> StackedResidual {
    let d = stacked.dof;
    if d < window_error_dim || window_error_dim == 0 {
        return stacked;
    }
    let cols = stacked.h_x.ncols();
    let h_w = stacked.h_x.view((0, ROBO_DIM), (d, window_error_dim)).clone_owned();
    let qr = h_w.qr();
    let q1 = qr.q();
    let t_w = qr.r();
    let r_new = q1.transpose() * &stacked.r;
    let mut h_new = DMat::zeros(window_error_dim, cols);
    h_new.view_mut((0, ROBO_DIM), (window_error_dim, window_error_dim)).copy_from(&t_w);
    StackedResidual { r: r_new, h_x: h_new, noise_var: stacked.noise_var, dof: window_error_dim }
}

/// Standard EKF update with Joseph-form covariance and multiplicative
/// quaternion corrections.
pub fn ekf_update(state: &mut FilterState, res: &StackedResidual) -> Result<()> {
    let n = state.error_dim();
    debug_assert_eq!(res.h_x.ncols(), n);
    let s = &res.h_x * &state.cov * res.h_x.transpose()
        + DMat::identity(res.dof, res.dof) * res.noise_var;
    let chol = s.cholesky().ok_or(Error::SingularInnovation)?;
    let k = chol.solve(&(&res.h_x * &state.cov)).transpose();
    let dx = &k * &res.r;

    apply_correction(state, &dx)?;

    let a = DMat::identity(n, n) - &k * &res.h_x;
    state.cov = &a * &state.cov * a.transpose() + &k * k.transpose() * res.noise_var;
    state.symmetrize_cov();
    Ok(())
}

fn apply_correction(state: &mut FilterState, dx: &DVec) -> Result<()> {
    let seg = |off: usize| Vec3::new(dx[off], dx[off + 1], dx[off + 2]);
    state.global.q_global = small_angle_quat(&seg(idx::THETA_G))?.multiply(&state.global.q_global);
    state.global.p_global += seg(idx::P_G);
    state.global.gravity_local += seg(idx::GRAVITY);
    state.imu.q_rel = small_angle_quat(&seg(idx::THETA_I))?.multiply(&state.imu.q_rel);
    state.imu.p_rel += seg(idx::P_I);
    state.imu.v += seg(idx::VEL);
    state.imu.b_g += seg(idx::BG);
    state.imu.b_a += seg(idx::BA);
    for (m, pose) in state.window.poses.iter_mut().enumerate() {
        let off = ROBO_DIM + POSE_DIM * m;
        pose.q = small_angle_quat(&seg(off))?.multiply(&pose.q);
        pose.p += seg(off + 3);
    }
    Ok(())
}

/// Stochastic cloning: appends a copy of the current relative pose to the
/// window and augments the covariance with the selection Jacobian rows.
/// Marginalizes the oldest pose first when the window is full.
pub fn augment(state: &mut FilterState) -> Result<()> {
    if state.window.len() == state.window.n_max {
        state.marginalize_oldest()?;
    }
    let n = state.cov.nrows();
    let mut cov = DMat::zeros(n + POSE_DIM, n + POSE_DIM);
    cov.view_mut((0, 0), (n, n)).copy_from(&state.cov);
    let sel = state.cov.view((idx::THETA_I, 0), (POSE_DIM, n)).clone_owned();
    cov.view_mut((n, 0), (POSE_DIM, n)).copy_from(&sel);
    cov.view_mut((0, n), (n, POSE_DIM)).copy_from(&sel.transpose());
    let corner = state.cov.view((idx::THETA_I, idx::THETA_I), (POSE_DIM, POSE_DIM)).clone_owned();
    cov.view_mut((n, n), (POSE_DIM, POSE_DIM)).copy_from(&corner);
    state.cov = cov;
    state.window.poses.push(RelativePose { q: state.imu.q_rel, p: state.imu.p_rel });
    Ok(())
}

/// Outcome counters of one update epoch.
#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    pub landmarks_used: usize,
    pub landmarks_gated_out: usize,
    pub landmarks_degenerate: usize,
    pub residual_rows: usize,
}

/// Processes all completed tracks of one image epoch: triangulate, build
/// Jacobians, project out the landmark, gate against the propagated prior,
/// then one joint QR-compressed EKF update.
///
/// Observations must already be expressed in window frame slots.
pub fn process_tracks(
    state: &mut FilterState,
    tracks: &[Vec<(usize, Vec2)>],
    extrinsics: &CameraImuExtrinsics,
    params: &FilterParams,
    sigma_im: f64,
) -> Result<UpdateStats> {
    let mut stats = UpdateStats::default();
    if tracks.is_empty() {
        return Ok(stats);
    }
    let chain = CameraChain::new(&state.window, extrinsics);
    let mut accepted: Vec<StackedResidual> = Vec::new();
    for obs in tracks {
        let lm = match triangulate_with_chain(obs, &chain, params) {
            Ok(lm) => lm,
            Err(_) => {
                stats.landmarks_degenerate += 1;
                continue;
            }
        };
        let sys = match measurement_jacobians_with_chain(obs, &lm, &chain, state.window.len(), params) {
            Ok(sys) => sys,
            Err(_) => {
                stats.landmarks_degenerate += 1;
                continue;
            }
        };
        let projected = match nullspace_project(&sys.r, &sys.h_x, &sys.h_lambda, !sys.low_parallax, sigma_im) {
            Ok(p) => p,
            Err(_) => {
                stats.landmarks_degenerate += 1;
                continue;
            }
        };
        match mahalanobis_gate(&projected, &state.cov, params.chi2_alpha) {
            Ok(true) => {
                stats.landmarks_used += 1;
                accepted.push(projected);
            }
            Ok(false) | Err(_) => {
                stats.landmarks_gated_out += 1;
            }
        }
    }
    if let Some(stacked) = stack_residuals(&accepted) {
        let compressed = qr_compress(stacked, state.window.error_dim());
        stats.residual_rows = compressed.dof;
        ekf_update(state, &compressed)?;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagation::ImuSample;
    use crate::state::{FilterParams, NoiseConfig};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn params() -> FilterParams {
        FilterParams::default()
    }

    fn window_from(poses: &[(UnitQuat, Vec3)]) -> SlidingWindow {
        let mut w = SlidingWindow::new(20);
        for (q, p) in poses {
            w.poses.push(RelativePose { q: *q, p: *p });
        }
        w
    }

    fn random_quat(rng: &mut StdRng, scale: f64) -> UnitQuat {
        let v = Vec3::new(
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
        );
        small_angle_quat(&v).unwrap()
    }

    #[test]
    fn chain_identity_for_same_slot() {
        let w = window_from(&[(UnitQuat::identity(), Vec3::new(1.0, 0.0, 0.0))]);
        let ext = CameraImuExtrinsics::identity();
        let (rot, p) = relative_pose_chain(&w, &ext, 1, 1).unwrap();
        assert_relative_eq!(rot, Mat3::identity(), epsilon = 1e-15);
        assert_relative_eq!(p, Vec3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn chain_single_translation_step() {
        let w = window_from(&[(UnitQuat::identity(), Vec3::new(1.0, 0.0, 0.0))]);
        let ext = CameraImuExtrinsics::identity();
        let (rot, p) = relative_pose_chain(&w, &ext, 0, 1).unwrap();
        assert_relative_eq!(rot, Mat3::identity(), epsilon = 1e-15);
        assert_relative_eq!(p, Vec3::new(-1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn chain_out_of_window_errors() {
        let w = window_from(&[(UnitQuat::identity(), Vec3::zeros())]);
        let ext = CameraImuExtrinsics::identity();
        assert!(matches!(
            relative_pose_chain(&w, &ext, 0, 2),
            Err(Error::IndexOutOfWindow { .. })
        ));
    }

    // Homogeneous-transform oracle: compose 4x4 transforms T(frame m -> m+1)
    // and camera extrinsics independently.
    fn oracle_camera_pair(
        poses: &[(UnitQuat, Vec3)],
        ext: &CameraImuExtrinsics,
        first: usize,
        i: usize,
    ) -> (Mat3, Vec3) {
        let make_t = |rot: Mat3, t: Vec3| {
            let mut m = nalgebra::Matrix4::<f64>::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
            m
        };
        // T_{m+1 <- m}: x_{m+1} = C x_m + t, with t = -C p (p = origin of
        // m+1 in frame m).
        let mut t_i_first = nalgebra::Matrix4::<f64>::identity();
        for pose in poses.iter().take(i).skip(first) {
            let c = pose.0.to_matrix();
            t_i_first = make_t(c, -c * pose.1) * t_i_first;
        }
        let c_ci = ext.q_cam_imu.to_matrix();
        let t_cam_imu = make_t(c_ci, ext.p_imu_in_cam);
        let t = t_cam_imu * t_i_first * t_cam_imu.try_inverse().unwrap();
        (
            t.fixed_view::<3, 3>(0, 0).clone_owned(),
            t.fixed_view::<3, 1>(0, 3).clone_owned(),
        )
    }

    #[test]
    fn chain_matches_homogeneous_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let poses: Vec<(UnitQuat, Vec3)> = (0..3)
                .map(|_| {
                    (
                        random_quat(&mut rng, 0.6),
                        Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                    )
                })
                .collect();
            let ext = CameraImuExtrinsics {
                q_cam_imu: random_quat(&mut rng, 0.8),
                p_imu_in_cam: Vec3::new(0.1, -0.05, 0.02),
            };
            let w = window_from(&poses);
            for first in 0..3 {
                for i in first..4 {
                    let (rot, p) = relative_pose_chain(&w, &ext, first, i).unwrap();
                    let (rot_o, p_o) = oracle_camera_pair(&poses, &ext, first, i);
                    assert_relative_eq!(rot, rot_o, epsilon = 1e-10);
                    assert_relative_eq!(p, p_o, epsilon = 1e-10);
                }
            }
        }
    }

    // Projects a world point through the chain for synthetic measurements.
    fn project_point(
        chain_poses: &[(UnitQuat, Vec3)],
        ext: &CameraImuExtrinsics,
        point_in_c0: Vec3,
        slot: usize,
    ) -> Vec2 {
        let w = window_from(chain_poses);
        let (rot, p) = relative_pose_chain(&w, ext, 0, slot).unwrap();
        let pc = rot * point_in_c0 + p;
        Vec2::new(pc.x / pc.z, pc.y / pc.z)
    }

    #[test]
    fn triangulate_two_view_closed_form() {
        // Two-ray oracle: landmark at (0,0,5) in C_1, baseline (1,0,0).
        let poses = [(UnitQuat::identity(), Vec3::new(1.0, 0.0, 0.0))];
        let ext = CameraImuExtrinsics::identity();
        let target = Vec3::new(0.0, 0.0, 5.0);
        let obs = vec![
            (0, project_point(&poses, &ext, target, 0)),
            (1, project_point(&poses, &ext, target, 1)),
        ];
        let w = window_from(&poses);
        let lm = triangulate(&obs, &w, &ext, &params()).unwrap();
        assert!(lm.phi.abs() < 1e-8, "phi {}", lm.phi);
        assert!(lm.psi.abs() < 1e-8, "psi {}", lm.psi);
        assert_relative_eq!(lm.rho, 0.2, epsilon = 1e-8);
    }

    #[test]
    fn triangulate_zero_baseline_stays_at_infinity() {
        let poses = [(UnitQuat::identity(), Vec3::zeros())];
        let ext = CameraImuExtrinsics::identity();
        let z = Vec2::new(0.12, -0.07);
        let obs = vec![(0, z), (1, z)];
        let w = window_from(&poses);
        let lm = triangulate(&obs, &w, &ext, &params()).unwrap();
        assert_eq!(lm.rho, 0.0);
        assert_relative_eq!(lm.psi, z.x.atan2(1.0), epsilon = 1e-12);
        assert_relative_eq!(lm.phi, z.y.atan2((z.x * z.x + 1.0_f64).sqrt()), epsilon = 1e-12);
    }

    #[test]
    fn triangulate_too_few_observations() {
        let w = window_from(&[]);
        let ext = CameraImuExtrinsics::identity();
        assert!(matches!(
            triangulate(&[(0, Vec2::zeros())], &w, &ext, &params()),
            Err(Error::TooFewObservations(1))
        ));
    }

    #[test]
    fn triangulate_noisy_views_recovers_depth() {
        use rand_distr::{Distribution, Normal};
        let mut rng = StdRng::seed_from_u64(99);
        let noise = Normal::new(0.0, 1.5 / 460.0).unwrap();
        let mut depth_errs = Vec::new();
        for _ in 0..40 {
            // 10 views translating sideways, point ~6 m ahead.
            let poses: Vec<(UnitQuat, Vec3)> =
                (0..9).map(|_| (UnitQuat::identity(), Vec3::new(0.2, 0.0, 0.0))).collect();
            let ext = CameraImuExtrinsics::identity();
            let target = Vec3::new(0.5, -0.3, 6.0);
            let obs: Vec<(usize, Vec2)> = (0..10)
                .map(|s| {
                    let z = project_point(&poses, &ext, target, s);
                    (s, z + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng)))
                })
                .collect();
            let w = window_from(&poses);
            let lm = triangulate(&obs, &w, &ext, &params()).unwrap();
            let depth = 1.0 / lm.rho;
            depth_errs.push((depth - target.norm()).abs());
        }
        let mean: f64 = depth_errs.iter().sum::<f64>() / depth_errs.len() as f64;
        // 5% of the ~6 m ray depth.
        assert!(mean < 0.3, "mean ray-depth error {mean}");
    }

    #[test]
    fn jacobian_on_axis_point() {
        let h = Vec3::new(0.0, 0.0, 2.5);
        let hp = h_projection_jacobian(&h);
        assert_relative_eq!(hp[(0, 0)], 1.0 / 2.5, epsilon = 1e-15);
        assert_relative_eq!(hp[(1, 1)], 1.0 / 2.5, epsilon = 1e-15);
        assert_eq!(hp[(0, 2)], 0.0);
        assert_eq!(hp[(1, 2)], 0.0);
    }

    #[test]
    fn jacobian_infinity_point_is_bearing_only() {
        let mut rng = StdRng::seed_from_u64(4);
        let poses: Vec<(UnitQuat, Vec3)> = (0..3)
            .map(|_| (random_quat(&mut rng, 0.3), Vec3::new(0.4, 0.1, -0.2)))
            .collect();
        let w = window_from(&poses);
        let ext = CameraImuExtrinsics::identity();
        let lm = InverseDepthLandmark { phi: 0.1, psi: -0.2, rho: 0.0 };
        let obs: Vec<(usize, Vec2)> = (0..4).map(|s| (s, Vec2::new(0.1, 0.1))).collect();
        let sys = measurement_jacobians(&obs, &lm, &w, &ext, &params()).unwrap();
        // Translation blocks carry a factor ρ and vanish.
        for view in 0..4 {
            for m in 0..3 {
                let dp = sys
                    .h_x
                    .view((2 * view, ROBO_DIM + POSE_DIM * m + 3), (2, 3))
                    .amax();
                assert!(dp < 1e-15, "p block must vanish at infinity, got {dp}");
            }
        }
    }

    fn synthetic_geometry(
        rng: &mut StdRng,
    ) -> (Vec<(UnitQuat, Vec3)>, CameraImuExtrinsics, Vec<(usize, Vec2)>, InverseDepthLandmark) {
        let poses: Vec<(UnitQuat, Vec3)> = (0..4)
            .map(|_| {
                (
                    random_quat(rng, 0.25),
                    Vec3::new(
                        0.3 + rng.gen_range(-0.1..0.1),
                        rng.gen_range(-0.2..0.2),
                        rng.gen_range(-0.2..0.2),
                    ),
                )
            })
            .collect();
        let ext = CameraImuExtrinsics {
            q_cam_imu: random_quat(rng, 0.4),
            p_imu_in_cam: Vec3::new(0.05, -0.02, 0.01),
        };
        let target = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(4.0..8.0));
        let obs: Vec<(usize, Vec2)> =
            (0..5).map(|s| (s, project_point(&poses, &ext, target, s))).collect();
        let rho = 1.0 / target.norm();
        let dir = target / target.norm();
        let lm = InverseDepthLandmark { phi: dir.y.asin(), psi: dir.x.atan2(dir.z), rho };
        (poses, ext, obs, lm)
    }

    #[test]
    fn measurement_jacobians_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(123);
        for _ in 0..20 {
            let (poses, ext, obs, lm) = synthetic_geometry(&mut rng);
            let w = window_from(&poses);
            let sys = measurement_jacobians(&obs, &lm, &w, &ext, &params()).unwrap();
            let eps = 1e-6;

            // Predicted stacked measurement as a function of window errors
            // and landmark errors.
            let predict = |dw: &DVec, dl: &Vec3| -> DVec {
                let mut wp = w.clone();
                for (m, pose) in wp.poses.iter_mut().enumerate() {
                    let off = POSE_DIM * m;
                    let dth = Vec3::new(dw[off], dw[off + 1], dw[off + 2]);
                    pose.q = small_angle_quat(&dth).unwrap().multiply(&pose.q);
                    pose.p += Vec3::new(dw[off + 3], dw[off + 4], dw[off + 5]);
                }
                let lmp = InverseDepthLandmark {
                    phi: lm.phi + dl.x,
                    psi: lm.psi + dl.y,
                    rho: lm.rho + dl.z,
                };
                let chain = CameraChain::new(&wp, &ext);
                let mut out = DVec::zeros(2 * obs.len());
                for (i, (slot, _)) in obs.iter().enumerate() {
                    let h = h_vector(&chain, obs[0].0, *slot, &lmp).unwrap();
                    let z = project_h(&h);
                    out[2 * i] = z.x;
                    out[2 * i + 1] = z.y;
                }
                out
            };

            for c in 0..POSE_DIM * w.len() {
                let mut dw = DVec::zeros(POSE_DIM * w.len());
                dw[c] = eps;
                let plus = predict(&dw, &Vec3::zeros());
                dw[c] = -eps;
                let minus = predict(&dw, &Vec3::zeros());
                let col = (plus - minus) / (2.0 * eps);
                for rrow in 0..col.len() {
                    // r = z − ẑ(x̂) ≈ H x̃ means H = ∂ẑ/∂x̃ at the estimate.
                    let expect = sys.h_x[(rrow, ROBO_DIM + c)];
                    let got = col[rrow];
                    assert!(
                        (got - expect).abs() / expect.abs().max(1.0) < 1e-5,
                        "H_w mismatch row {rrow} col {c}: fd {got} vs {expect}"
                    );
                }
            }
            for c in 0..3 {
                let mut dl = Vec3::zeros();
                dl[c] = eps;
                let plus = predict(&DVec::zeros(POSE_DIM * w.len()), &dl);
                dl[c] = -eps;
                let minus = predict(&DVec::zeros(POSE_DIM * w.len()), &dl);
                let col = (plus - minus) / (2.0 * eps);
                for rrow in 0..col.len() {
                    let expect = sys.h_lambda[(rrow, c)];
                    let got = col[rrow];
                    assert!(
                        (got - expect).abs() / expect.abs().max(1.0) < 1e-5,
                        "H_λ mismatch row {rrow} col {c}: fd {got} vs {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn nullspace_projection_annihilates_landmark_jacobian() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let (poses, ext, obs, lm) = synthetic_geometry(&mut rng);
            let w = window_from(&poses);
            let sys = measurement_jacobians(&obs, &lm, &w, &ext, &params()).unwrap();
            let rows = sys.r.len();
            // Apply the same rotations to H_λ and verify the surviving rows
            // vanish: run projection with H_λ standing in for all blocks.
            let projected =
                nullspace_project(&sys.r, &sys.h_lambda, &sys.h_lambda, true, 1.5 / 460.0).unwrap();
            assert_eq!(projected.dof, rows - 3);
            assert!(projected.h_x.amax() < 1e-10, "residual H_λ {}", projected.h_x.amax());
        }
    }

    #[test]
    fn nullspace_projection_dof_counts() {
        // n views → 2n rows → 2n−3 dof with parallax, 2n−2 without.
        let rows = 20;
        let r = DVec::from_fn(rows, |i, _| i as f64 * 0.01);
        let h_x = DMat::from_fn(rows, 30, |i, j| ((i + j) % 5) as f64);
        let h_l = DMat::from_fn(rows, 3, |i, j| ((i * 3 + j) % 7) as f64 + 0.1);
        assert_eq!(nullspace_project(&r, &h_x, &h_l, true, 1e-3).unwrap().dof, 17);
        assert_eq!(nullspace_project(&r, &h_x, &h_l, false, 1e-3).unwrap().dof, 18);
        assert!(matches!(
            nullspace_project(&DVec::zeros(3), &DMat::zeros(3, 30), &DMat::zeros(3, 3), true, 1e-3),
            Err(Error::TooFewRows { .. })
        ));
    }

    #[test]
    fn nullspace_projection_preserves_information() {
        let mut rng = StdRng::seed_from_u64(15);
        let (poses, ext, obs, lm) = synthetic_geometry(&mut rng);
        let w = window_from(&poses);
        let sys = measurement_jacobians(&obs, &lm, &w, &ext, &params()).unwrap();
        let rows = sys.r.len();
        // Rotate the full system rows and split: HᵀH must decompose into
        // surviving + projected-out parts (orthonormality of the rotations).
        let mut h_l = sys.h_lambda.clone();
        let mut h_x = sys.h_x.clone();
        let mut r = sys.r.clone();
        for c in 0..3 {
            for row in (c + 1)..rows {
                let (a, b) = (h_l[(c, c)], h_l[(row, c)]);
                if b == 0.0 {
                    continue;
                }
                let rho = a.hypot(b);
                let (cos, sin) = (a / rho, -b / rho);
                givens_rows(&mut h_l, c, row, cos, sin);
                givens_rows(&mut h_x, c, row, cos, sin);
                let (rc, rr) = (r[c], r[row]);
                r[c] = cos * rc - sin * rr;
                r[row] = sin * rc + cos * rr;
            }
        }
        let top = h_x.rows(0, 3).clone_owned();
        let bottom = h_x.rows(3, rows - 3).clone_owned();
        let recomposed = top.transpose() * top + bottom.transpose() * &bottom;
        let original = sys.h_x.transpose() * &sys.h_x;
        assert_relative_eq!(recomposed, original, epsilon = 1e-9);
    }

    fn simple_state_with_window(n_poses: usize) -> FilterState {
        let samples: Vec<ImuSample> = (0..10)
            .map(|i| ImuSample { t: i as f64 * 0.01, gyro: Vec3::zeros(), accel: Vec3::new(0.0, 0.0, 9.81) })
            .collect();
        let noise =
            NoiseConfig { sigma_g: 1e-4, sigma_wg: 1e-6, sigma_a: 1e-3, sigma_wa: 1e-5, sigma_im: 3e-3 };
        let mut s = FilterState::initialize(&samples, 1.0, &params(), &noise).unwrap();
        for i in 0..n_poses {
            s.window.poses.push(RelativePose {
                q: UnitQuat::identity(),
                p: Vec3::new(0.1 * (i + 1) as f64, 0.0, 0.0),
            });
        }
        let dim = ROBO_DIM + POSE_DIM * n_poses;
        let a = DMat::from_fn(dim, dim, |i, j| ((i * 13 + j * 7) % 17) as f64 * 0.02);
        s.cov = &a * a.transpose() + DMat::identity(dim, dim) * 0.05;
        s
    }

    #[test]
    fn gate_accepts_zero_residual_rejects_inflated() {
        let s = simple_state_with_window(3);
        let dof = 8;
        let dim = s.error_dim();
        let h = DMat::from_fn(dof, dim, |i, j| if j >= ROBO_DIM { ((i + j) % 3) as f64 * 0.2 } else { 0.0 });
        let zero = StackedResidual { r: DVec::zeros(dof), h_x: h.clone(), noise_var: 1e-5, dof };
        assert!(mahalanobis_gate(&zero, &s.cov, 0.05).unwrap());
        let s_innov = &h * &s.cov * h.transpose() + DMat::identity(dof, dof) * 1e-5;
        let scale = s_innov.diagonal().map(|v| v.sqrt());
        let inflated = StackedResidual {
            r: DVec::from_fn(dof, |i, _| 10.0 * scale[i]),
            h_x: h,
            noise_var: 1e-5,
            dof,
        };
        assert!(!mahalanobis_gate(&inflated, &s.cov, 0.05).unwrap());
    }

    #[test]
    fn qr_compress_preserves_normal_equations() {
        let mut rng = StdRng::seed_from_u64(21);
        let wdim = 18;
        let dim = ROBO_DIM + wdim;
        let d = 60;
        let mut h_x = DMat::zeros(d, dim);
        for i in 0..d {
            for j in 0..wdim {
                h_x[(i, ROBO_DIM + j)] = rng.gen_range(-1.0..1.0);
            }
        }
        let r = DVec::from_fn(d, |_, _| rng.gen_range(-0.01..0.01));
        let var = 1e-6;
        let stacked = StackedResidual { r: r.clone(), h_x: h_x.clone(), noise_var: var, dof: d };
        let compressed = qr_compress(stacked, wdim);
        assert_eq!(compressed.dof, wdim);
        assert_eq!(compressed.noise_var, var);
        // Information equivalence Hᵀ R⁻¹ H and Hᵀ R⁻¹ r; the shared 1/σ²
        // cancels in the comparison.
        let lhs = compressed.h_x.transpose() * &compressed.h_x;
        let rhs = h_x.transpose() * &h_x;
        assert_relative_eq!(lhs, rhs, epsilon = 1e-9, max_relative = 1e-9);
        let lhs_b = compressed.h_x.transpose() * &compressed.r;
        let rhs_b = h_x.transpose() * &r;
        assert_relative_eq!(lhs_b, rhs_b, epsilon = 1e-9, max_relative = 1e-9);
    }

    #[test]
    fn qr_compress_skips_small_stacks() {
        let stacked = StackedResidual {
            r: DVec::zeros(5),
            h_x: DMat::zeros(5, 30),
            noise_var: 1e-6,
            dof: 5,
        };
        let out = qr_compress(stacked.clone(), 6);
        assert_eq!(out.dof, stacked.dof);
        assert_eq!(out.h_x, stacked.h_x);
    }

    #[test]
    fn qr_compress_exact_size_preserves_residual_norm() {
        let mut rng = StdRng::seed_from_u64(33);
        let wdim = 12;
        let d = 12;
        let mut h_x = DMat::zeros(d, ROBO_DIM + wdim);
        for i in 0..d {
            for j in 0..wdim {
                h_x[(i, ROBO_DIM + j)] = rng.gen_range(-1.0..1.0);
            }
        }
        let r = DVec::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        let compressed = qr_compress(
            StackedResidual { r: r.clone(), h_x, noise_var: 1e-6, dof: d },
            wdim,
        );
        // Square orthogonal rotation: norm preserved.
        assert_relative_eq!(compressed.r.norm(), r.norm(), epsilon = 1e-10);
    }

    #[test]
    fn ekf_update_zero_residual_keeps_mean() {
        let mut s = simple_state_with_window(2);
        let before = s.clone();
        let dim = s.error_dim();
        let dof = 6;
        let h = DMat::from_fn(dof, dim, |i, j| if j >= ROBO_DIM { ((i * j) % 4) as f64 * 0.3 } else { 0.0 });
        let res = StackedResidual { r: DVec::zeros(dof), h_x: h, noise_var: 1e-5, dof };
        ekf_update(&mut s, &res).unwrap();
        assert_relative_eq!(s.imu.p_rel, before.imu.p_rel, epsilon = 1e-15);
        assert_relative_eq!(s.global.p_global, before.global.p_global, epsilon = 1e-15);
        assert!(s.cov.trace() <= before.cov.trace() + 1e-12);
    }

    #[test]
    fn ekf_update_matches_scalar_kalman() {
        // One observed coordinate: the x-translation of the first window
        // pose. Hand-computed scalar Kalman gain.
        let mut s = simple_state_with_window(1);
        s.cov = DMat::identity(30, 30) * 0.04;
        let dim = 30;
        let mut h = DMat::zeros(1, dim);
        let col = ROBO_DIM + 3;
        h[(0, col)] = 1.0;
        let r_var = 0.01;
        let innov = 0.3;
        let res = StackedResidual { r: DVec::from_element(1, innov), h_x: h, noise_var: r_var, dof: 1 };
        let p_before = s.cov[(col, col)];
        let x_before = s.window.poses[0].p.x;
        ekf_update(&mut s, &res).unwrap();
        let k = p_before / (p_before + r_var);
        assert_relative_eq!(s.window.poses[0].p.x, x_before + k * innov, epsilon = 1e-12);
        assert_relative_eq!(s.cov[(col, col)], (1.0 - k) * p_before, epsilon = 1e-12);
    }

    #[test]
    fn augment_fresh_state_zero_block() {
        let samples: Vec<ImuSample> = (0..10)
            .map(|i| ImuSample { t: i as f64 * 0.01, gyro: Vec3::zeros(), accel: Vec3::new(0.0, 0.0, 9.81) })
            .collect();
        let noise =
            NoiseConfig { sigma_g: 1e-4, sigma_wg: 1e-6, sigma_a: 1e-3, sigma_wa: 1e-5, sigma_im: 3e-3 };
        let mut s = FilterState::initialize(&samples, 1.0, &params(), &noise).unwrap();
        augment(&mut s).unwrap();
        assert_eq!(s.window.len(), 1);
        assert_eq!(s.cov.nrows(), 30);
        assert_eq!(s.cov.view((24, 0), (6, 30)).amax(), 0.0);
        let p = &s.window.poses[0];
        assert_eq!(p.p, Vec3::zeros());
        assert_eq!(p.q.coords(), UnitQuat::identity().coords());
    }

    #[test]
    fn augment_matches_jpj_oracle() {
        let mut s = simple_state_with_window(2);
        s.imu.q_rel = UnitQuat::new(0.1, -0.2, 0.05, 0.97);
        s.imu.p_rel = Vec3::new(0.3, 0.1, -0.4);
        let n = s.cov.nrows();
        let p0 = s.cov.clone();
        // J selects the (δθ_I, p̃_I) rows.
        let mut j = DMat::zeros(POSE_DIM, n);
        for i in 0..POSE_DIM {
            j[(i, idx::THETA_I + i)] = 1.0;
        }
        augment(&mut s).unwrap();
        let cross = &j * &p0;
        let corner = &j * &p0 * j.transpose();
        assert_relative_eq!(s.cov.view((n, 0), (6, n)).clone_owned(), cross, epsilon = 1e-14);
        assert_relative_eq!(s.cov.view((n, n), (6, 6)).clone_owned(), corner, epsilon = 1e-14);
        assert_eq!(s.window.poses.last().unwrap().p, Vec3::new(0.3, 0.1, -0.4));
    }

    #[test]
    fn augment_at_capacity_keeps_dimension() {
        let mut s = simple_state_with_window(2);
        s.window.n_max = 2;
        let dim_before = s.cov.nrows();
        let second_pose_cov = s.cov.view((30, 30), (6, 6)).clone_owned();
        augment(&mut s).unwrap();
        assert_eq!(s.window.len(), 2);
        assert_eq!(s.cov.nrows(), dim_before);
        // The old second pose is now the first.
        assert_relative_eq!(s.cov.view((24, 24), (6, 6)).clone_owned(), second_pose_cov, epsilon = 1e-15);
    }

    #[test]
    fn augment_then_compose_matches_compose_then_cached_augment() {
        // Ordering guard: augmentation must not change the global pose, and
        // the two pipelines must agree on it.
        let mut rng = StdRng::seed_from_u64(55);
        let mut a = simple_state_with_window(2);
        a.imu.q_rel = random_quat(&mut rng, 0.5);
        a.imu.p_rel = Vec3::new(0.4, -0.1, 0.2);
        a.global.q_global = random_quat(&mut rng, 1.0);
        a.global.p_global = Vec3::new(1.0, 2.0, -0.5);
        let mut b = a.clone();

        augment(&mut a).unwrap();
        crate::composition::compose(&mut a);

        let cached = RelativePose { q: b.imu.q_rel, p: b.imu.p_rel };
        crate::composition::compose(&mut b);
        b.window.poses.push(cached);

        let (qa, pa) = a.global_pose();
        let (qb, pb) = b.global_pose();
        assert_relative_eq!(pa, pb, epsilon = 1e-13);
        assert!(qa.multiply(&qb.inverse()).angle() < 1e-13);
        assert_eq!(a.window.poses.last().unwrap().p, b.window.poses.last().unwrap().p);
    }
}
