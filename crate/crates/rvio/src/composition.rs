//! Composition step: shift the frame of reference to the newest IMU frame.
//!
//! The global pose and local gravity are re-expressed in the new frame, the
//! relative pose is reset to the origin with exactly zero covariance, and the
//! covariance is mapped through the composition Jacobian U = diag(V, I).

use crate::so3::skew;
use crate::state::{idx, FilterState};
use crate::{DMat, Mat3, Vec3, ROBO_DIM};

/// Composition Jacobian V of the robocentric block, evaluated with the
/// pre-reset relative rotation and the post-composition global position and
/// gravity.
pub fn composition_jacobian(c_rel: &Mat3, p_global_new: &Vec3, gravity_new: &Vec3) -> DMat {
    let mut v = DMat::zeros(ROBO_DIM, ROBO_DIM);
    let set = |m: &mut DMat, r: usize, c: usize, b: &Mat3| {
        m.view_mut((r, c), (3, 3)).copy_from(b);
    };
    let eye = Mat3::identity();
    set(&mut v, idx::THETA_G, idx::THETA_G, c_rel);
    set(&mut v, idx::THETA_G, idx::THETA_I, &eye);
    set(&mut v, idx::P_G, idx::P_G, c_rel);
    set(&mut v, idx::P_G, idx::THETA_I, &skew(p_global_new));
    set(&mut v, idx::P_G, idx::P_I, &(-c_rel));
    set(&mut v, idx::GRAVITY, idx::GRAVITY, c_rel);
    set(&mut v, idx::GRAVITY, idx::THETA_I, &skew(gravity_new));
    set(&mut v, idx::VEL, idx::VEL, &eye);
    set(&mut v, idx::BG, idx::BG, &eye);
    set(&mut v, idx::BA, idx::BA, &eye);
    v
}

/// Composes the state mean only: global pose and gravity re-expressed in the
/// new frame, relative pose reset, velocity and biases untouched.
pub fn compose_mean(state: &mut FilterState) {
    let c_rel = state.imu.q_rel.to_matrix();
    state.global.q_global = state.imu.q_rel.multiply(&state.global.q_global);
    state.global.p_global = c_rel * (state.global.p_global - state.imu.p_rel);
    state.global.gravity_local = c_rel * state.global.gravity_local;
    state.imu.q_rel = crate::so3::UnitQuat::identity();
    state.imu.p_rel = Vec3::zeros();
    state.epoch += 1;
}

/// Full composition: mean plus covariance `P ← U P Uᵀ` with the relative-pose
/// rows and columns exactly zero afterwards.
pub fn compose(state: &mut FilterState) {
    let c_rel = state.imu.q_rel.to_matrix();
    compose_mean(state);
    let v = composition_jacobian(&c_rel, &state.global.p_global, &state.global.gravity_local);

    let n = state.cov.nrows();
    let w = n - ROBO_DIM;
    let p_xx = state.cov.view((0, 0), (ROBO_DIM, ROBO_DIM)).clone_owned();
    let mut new_xx = &v * p_xx * v.transpose();
    new_xx = (&new_xx + new_xx.transpose()) * 0.5;
    state.cov.view_mut((0, 0), (ROBO_DIM, ROBO_DIM)).copy_from(&new_xx);
    if w > 0 {
        let new_xw = &v * state.cov.view((0, ROBO_DIM), (ROBO_DIM, w)).clone_owned();
        state.cov.view_mut((0, ROBO_DIM), (ROBO_DIM, w)).copy_from(&new_xw);
        state.cov.view_mut((ROBO_DIM, 0), (w, ROBO_DIM)).copy_from(&new_xw.transpose());
    }
}
