//! IMU-driven propagation between images: zeroth-order quaternion
//! integration, preintegrated position/velocity terms, and discrete
//! error-state covariance propagation with the compound transition matrix.

use crate::so3::{integrate_step, skew, UnitQuat};
use crate::state::{idx, FilterState, NoiseConfig};
use crate::{DMat, Error, Result, Vec3, ROBO_DIM};

/// One IMU measurement: gyroscope (rad/s) and accelerometer (m/s²).
#[derive(Debug, Clone, Copy)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vec3,
    pub accel: Vec3,
}

/// Bias-corrected integrals of rotated accelerometer data accumulated over
/// an image interval. Reset at every composition epoch.
#[derive(Debug, Clone, Default)]
pub struct Preintegral {
    pub delta_p: Vec3,
    pub delta_v: Vec3,
    pub dt_total: f64,
}

/// Discrete error-state transition matrix Φ (24×24) and noise Jacobian G
/// (24×12) for one IMU interval, ordered like the robocentric error state.
#[derive(Debug, Clone)]
pub struct TransitionBlocks {
    pub phi: DMat,
    pub g: DMat,
}

/// Result of propagating over one IMU batch.
#[derive(Debug, Clone)]
pub struct Propagated {
    pub pre: Preintegral,
    /// Compound Φ over the whole batch (identity when only the mean was
    /// propagated).
    pub phi_compound: DMat,
}

fn check_batch(batch: &[ImuSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyImuBatch);
    }
    for w in batch.windows(2) {
        if w[1].t <= w[0].t {
            return Err(Error::NonMonotoneTimestamps);
        }
    }
    Ok(())
}

/// Integrates `q̇ = ½ Ω(ω_m − b_g) q` with the rate held constant over each
/// sample interval. The last sample only marks the end of the interval.
pub fn integrate_quaternion(q: &UnitQuat, samples: &[ImuSample], b_g: &Vec3) -> Result<UnitQuat> {
    check_batch(samples)?;
    let mut q = *q;
    for w in samples.windows(2) {
        let dt = w[1].t - w[0].t;
        q = integrate_step(&q, &(w[0].gyro - b_g), dt);
    }
    Ok(q)
}

/// Continuous-time error-state matrices F (24×24) and G (24×12) evaluated at
/// the given estimates. `v_body` is the velocity in the current IMU frame and
/// `gravity_local` the gravity in the frame of reference.
pub fn error_state_matrices(
    q_rel: &UnitQuat,
    v_body: &Vec3,
    gravity_local: &Vec3,
    omega_hat: &Vec3,
) -> (DMat, DMat) {
    let c = q_rel.to_matrix();
    let g_body = c * gravity_local;
    let mut f = DMat::zeros(ROBO_DIM, ROBO_DIM);
    let mut g = DMat::zeros(ROBO_DIM, 12);

    let set = |m: &mut DMat, r: usize, cidx: usize, b: &crate::Mat3| {
        m.view_mut((r, cidx), (3, 3)).copy_from(b);
    };

    set(&mut f, idx::THETA_I, idx::THETA_I, &(-skew(omega_hat)));
    set(&mut f, idx::THETA_I, idx::BG, &(-crate::Mat3::identity()));
    set(&mut f, idx::P_I, idx::THETA_I, &(-(c.transpose() * skew(v_body))));
    set(&mut f, idx::P_I, idx::VEL, &c.transpose());
    set(&mut f, idx::VEL, idx::GRAVITY, &(-c));
    set(&mut f, idx::VEL, idx::THETA_I, &(-skew(&g_body)));
    set(&mut f, idx::VEL, idx::VEL, &(-skew(omega_hat)));
    set(&mut f, idx::VEL, idx::BG, &(-skew(v_body)));
    set(&mut f, idx::VEL, idx::BA, &(-crate::Mat3::identity()));

    set(&mut g, idx::THETA_I, 0, &(-crate::Mat3::identity()));
    set(&mut g, idx::VEL, 0, &(-skew(v_body)));
    set(&mut g, idx::VEL, 6, &(-crate::Mat3::identity()));
    set(&mut g, idx::BG, 3, &crate::Mat3::identity());
    set(&mut g, idx::BA, 9, &crate::Mat3::identity());

    (f, g)
}

/// Forward-Euler transition `Φ = I + F δt` and noise Jacobian for one IMU
/// interval, evaluated at the current state estimate.
pub fn transition_and_noise(state: &FilterState, sample: &ImuSample, dt: f64) -> TransitionBlocks {
    let omega_hat = sample.gyro - state.imu.b_g;
    let (f, g) = error_state_matrices(
        &state.imu.q_rel,
        &state.imu.v,
        &state.global.gravity_local,
        &omega_hat,
    );
    TransitionBlocks { phi: DMat::identity(ROBO_DIM, ROBO_DIM) + f * dt, g }
}

/// Continuous-time input noise covariance Σ = Diag[σ_g², σ_wg², σ_a², σ_wa²]⊗I₃.
pub fn input_noise_covariance(noise: &NoiseConfig) -> DMat {
    let mut s = DMat::zeros(12, 12);
    let vars = [noise.sigma_g, noise.sigma_wg, noise.sigma_a, noise.sigma_wa];
    for (b, sd) in vars.iter().enumerate() {
        for i in 0..3 {
            s[(3 * b + i, 3 * b + i)] = sd * sd;
        }
    }
    s
}

/// One discrete covariance step: `P_xx ← Φ P_xx Φᵀ + G Σ Gᵀ δt`, cross block
/// left-multiplied by Φ, window block untouched.
pub fn propagate_covariance_step(p: &mut DMat, blocks: &TransitionBlocks, noise: &NoiseConfig, dt: f64) {
    let n = p.nrows();
    let w = n - ROBO_DIM;
    let p_xx = p.view((0, 0), (ROBO_DIM, ROBO_DIM)).clone_owned();
    let sigma = input_noise_covariance(noise);
    let mut new_xx = &blocks.phi * p_xx * blocks.phi.transpose() + &blocks.g * sigma * blocks.g.transpose() * dt;
    // Symmetry restored on the propagated block.
    new_xx = (&new_xx + new_xx.transpose()) * 0.5;
    p.view_mut((0, 0), (ROBO_DIM, ROBO_DIM)).copy_from(&new_xx);
    if w > 0 {
        let new_xw = &blocks.phi * p.view((0, ROBO_DIM), (ROBO_DIM, w)).clone_owned();
        p.view_mut((0, ROBO_DIM), (ROBO_DIM, w)).copy_from(&new_xw);
        p.view_mut((ROBO_DIM, 0), (w, ROBO_DIM)).copy_from(&new_xw.transpose());
    }
}

fn propagate_inner(
    state: &mut FilterState,
    batch: &[ImuSample],
    noise: Option<&NoiseConfig>,
) -> Result<Propagated> {
    check_batch(batch)?;
    let gravity = state.global.gravity_local;
    let mut q = state.imu.q_rel;
    // Position and velocity tracked in the frame of reference R_k.
    let mut p_rk = state.imu.p_rel;
    let mut v_rk = q.to_matrix().transpose() * state.imu.v;
    let mut pre = Preintegral::default();
    let mut phi_compound = DMat::identity(ROBO_DIM, ROBO_DIM);

    for w in batch.windows(2) {
        let dt = w[1].t - w[0].t;
        let omega_hat = w[0].gyro - state.imu.b_g;
        let accel_hat = w[0].accel - state.imu.b_a;

        if let Some(noise) = noise {
            // Jacobians at the per-step propagated estimate, in lockstep
            // with the mean.
            let v_body = q.to_matrix() * v_rk;
            let (f, g) = error_state_matrices(&q, &v_body, &gravity, &omega_hat);
            let blocks = TransitionBlocks { phi: DMat::identity(ROBO_DIM, ROBO_DIM) + f * dt, g };
            propagate_covariance_step(&mut state.cov, &blocks, noise, dt);
            phi_compound = &blocks.phi * phi_compound;
        }

        let q_next = integrate_step(&q, &omega_hat, dt);
        // Trapezoid between the attitudes bounding the interval.
        let rot_t = (q.to_matrix().transpose() + q_next.to_matrix().transpose()) * 0.5;
        let dv_inc = rot_t * accel_hat * dt;
        let v_next = v_rk - gravity * dt + dv_inc;
        p_rk += (v_rk + v_next) * (0.5 * dt);
        pre.delta_p += (pre.delta_v + (pre.delta_v + dv_inc)) * (0.5 * dt);
        pre.delta_v += dv_inc;
        pre.dt_total += dt;
        q = q_next;
        v_rk = v_next;
    }

    state.imu.q_rel = q;
    state.imu.p_rel = p_rk;
    state.imu.v = q.to_matrix() * v_rk;
    state.clock = batch.last().unwrap().t;
    Ok(Propagated { pre, phi_compound })
}

/// Propagates the state mean over an IMU batch (biases held constant),
/// leaving global block, window, and covariance unchanged.
pub fn propagate_mean(state: &mut FilterState, batch: &[ImuSample]) -> Result<Propagated> {
    propagate_inner(state, batch, None)
}

/// Propagates mean and covariance in lockstep over an IMU batch.
pub fn propagate(state: &mut FilterState, batch: &[ImuSample], noise: &NoiseConfig) -> Result<Propagated> {
    propagate_inner(state, batch, Some(noise))
}
