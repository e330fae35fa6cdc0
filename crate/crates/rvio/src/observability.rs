//! Observability-analysis toolkit: closed-form error-state transition over
//! an analysis window, observability matrix construction with and without
//! composition rows, numeric nullspace extraction, scale-direction checks,
//! and motion classification.
//!
//! The analysis model appends one landmark to the 24-dim robocentric state
//! (27 error dimensions); it is independent of the filter's sliding-window
//! state.

use crate::so3::{skew, UnitQuat};
use crate::{DMat, DVec, Error, Mat3, Result, Vec3, ROBO_DIM};
use serde::Serialize;

/// Error-state dimension of the analysis model (robocentric block plus one
/// landmark).
pub const OBS_DIM: usize = ROBO_DIM + 3;

/// One sample of the kinematic truth (or estimate) over the analysis window,
/// expressed relative to the frame of reference fixed at the window start.
#[derive(Debug, Clone)]
pub struct TrajectorySample {
    pub t: f64,
    /// Rotation from the window-start frame to the IMU frame at `t`.
    pub q_rel: UnitQuat,
    /// IMU position in the window-start frame.
    pub p_rel: Vec3,
    /// Velocity in the IMU frame.
    pub v_body: Vec3,
    /// Kinematic acceleration in the IMU frame (specific force minus the
    /// gravity effect).
    pub accel_body: Vec3,
    /// Angular rate in the IMU frame.
    pub omega_body: Vec3,
}

/// State history over one analysis window.
#[derive(Debug, Clone)]
pub struct StateHistory {
    pub samples: Vec<TrajectorySample>,
    /// Local gravity in the window-start frame.
    pub gravity: Vec3,
    /// Position of the global frame in the window-start frame.
    pub p_global: Vec3,
}

/// Closed-form 24×24 error-state transition over `[t_k, t_ℓ]`, with every
/// integral block evaluated by trapezoid quadrature along the history.
#[derive(Debug, Clone)]
pub struct AnalyticTransition {
    pub phi: DMat,
    pub dt: f64,
}

impl AnalyticTransition {
    /// Embeds Φ into the 27-dim analysis model (identity landmark block).
    pub fn psi(&self) -> DMat {
        let mut m = DMat::identity(OBS_DIM, OBS_DIM);
        m.view_mut((0, 0), (ROBO_DIM, ROBO_DIM)).copy_from(&self.phi);
        m
    }
}

#[derive(Debug, Clone, Default)]
struct RunningIntegrals {
    /// ∫ Cᵀ
    a1: Mat3,
    /// ∫∫ Cᵀ
    a2: Mat3,
    /// ∫∫∫ Cᵀ
    a3: Mat3,
    /// ∫ ⌊(Cᵀ v)×⌋ (∫ Cᵀ)
    b1: Mat3,
    /// ∫ Cᵀ ⌊v×⌋
    b2: Mat3,
    /// ∫∫ Cᵀ ⌊v×⌋
    b3: Mat3,
}

fn assemble_phi(sample: &TrajectorySample, t0: f64, gravity: &Vec3, acc: &RunningIntegrals) -> AnalyticTransition {
    let dt = sample.t - t0;
    let c_l = sample.q_rel.to_matrix();
    let g_skew = skew(gravity);
    let mut phi = DMat::identity(ROBO_DIM, ROBO_DIM);
    let set = |m: &mut DMat, r: usize, c: usize, b: &Mat3| {
        m.view_mut((r, c), (3, 3)).copy_from(b);
    };
    use crate::state::idx::*;
    set(&mut phi, THETA_I, THETA_I, &c_l);
    set(&mut phi, THETA_I, BG, &(-c_l * acc.a1));
    set(&mut phi, P_I, GRAVITY, &(Mat3::identity() * (-0.5 * dt * dt)));
    set(&mut phi, P_I, THETA_I, &(-skew(&(sample.p_rel + gravity * (0.5 * dt * dt)))));
    set(&mut phi, P_I, P_I, &Mat3::identity());
    set(&mut phi, P_I, VEL, &(Mat3::identity() * dt));
    set(&mut phi, P_I, BG, &(acc.b1 + g_skew * acc.a3 - acc.b3));
    set(&mut phi, P_I, BA, &(-acc.a2));
    set(&mut phi, VEL, GRAVITY, &(-c_l * dt));
    set(&mut phi, VEL, THETA_I, &(-c_l * g_skew * dt));
    set(&mut phi, VEL, VEL, &c_l);
    set(&mut phi, VEL, BG, &(c_l * (g_skew * acc.a2 - acc.b2)));
    set(&mut phi, VEL, BA, &(-c_l * acc.a1));
    AnalyticTransition { phi, dt }
}

/// Analytic Φ(ℓ, k) at selected sample indices, sharing one quadrature pass.
pub fn analytic_phi_sequence(history: &StateHistory, indices: &[usize]) -> Result<Vec<AnalyticTransition>> {
    if history.samples.len() < 2 {
        return Err(Error::HistoryTooSparse(history.samples.len()));
    }
    let t0 = history.samples[0].t;
    let mut acc = RunningIntegrals::default();
    let mut out = Vec::with_capacity(indices.len());
    let mut want: Vec<usize> = indices.to_vec();
    want.sort_unstable();
    let mut next = 0;

    let integrand = |s: &TrajectorySample| -> (Mat3, Mat3) {
        let ct = s.q_rel.to_matrix().transpose();
        (ct, ct * skew(&s.v_body))
    };
    let (mut f1_prev, mut f2_prev) = integrand(&history.samples[0]);
    let mut b1_integrand_prev = skew(&(f1_prev * history.samples[0].v_body)) * acc.a1;

    while next < want.len() && want[next] == 0 {
        out.push(assemble_phi(&history.samples[0], t0, &history.gravity, &acc));
        next += 1;
    }

    for i in 1..history.samples.len() {
        let s = &history.samples[i];
        let dt = s.t - history.samples[i - 1].t;
        let (f1, f2) = integrand(s);
        let a1_prev = acc.a1;
        let a2_prev = acc.a2;
        let b2_prev = acc.b2;
        acc.a1 += (f1_prev + f1) * (0.5 * dt);
        acc.a2 += (a1_prev + acc.a1) * (0.5 * dt);
        acc.a3 += (a2_prev + acc.a2) * (0.5 * dt);
        let b1_integrand = skew(&(f1 * s.v_body)) * acc.a1;
        acc.b1 += (b1_integrand_prev + b1_integrand) * (0.5 * dt);
        acc.b2 += (f2_prev + f2) * (0.5 * dt);
        acc.b3 += (b2_prev + acc.b2) * (0.5 * dt);
        f1_prev = f1;
        f2_prev = f2;
        b1_integrand_prev = b1_integrand;

        while next < want.len() && want[next] == i {
            out.push(assemble_phi(s, t0, &history.gravity, &acc));
            next += 1;
        }
    }
    if next < want.len() {
        return Err(Error::HistoryTooSparse(history.samples.len()));
    }
    // Restore the caller's index order.
    let mut sorted = want;
    let mut by_index: Vec<(usize, AnalyticTransition)> = sorted.drain(..).zip(out).collect();
    let mut result = Vec::with_capacity(indices.len());
    for idx in indices {
        let pos = by_index.iter().position(|(i, _)| i == idx).unwrap();
        result.push(by_index.remove(pos).1);
    }
    Ok(result)
}

/// Analytic Φ over the whole history.
pub fn analytic_phi(history: &StateHistory) -> Result<AnalyticTransition> {
    let last = history.samples.len().checked_sub(1).ok_or(Error::HistoryTooSparse(0))?;
    Ok(analytic_phi_sequence(history, &[last])?.pop().unwrap())
}

/// The bearing projection Π = H_p C(ℓ) and measurement row of the analysis
/// model at one sample.
fn measurement_row(sample: &TrajectorySample, landmark: &Vec3) -> Option<DMat> {
    let c_l = sample.q_rel.to_matrix();
    let p_in_imu = c_l * (landmark - sample.p_rel);
    if p_in_imu.z <= 1e-9 {
        return None;
    }
    let h_p = nalgebra::Matrix2x3::new(
        1.0,
        0.0,
        -p_in_imu.x / p_in_imu.z,
        0.0,
        1.0,
        -p_in_imu.y / p_in_imu.z,
    ) / p_in_imu.z;
    let h_theta = skew(&(landmark - sample.p_rel)) * c_l.transpose();
    let mut row3 = DMat::zeros(3, OBS_DIM);
    row3.view_mut((0, crate::state::idx::THETA_I), (3, 3)).copy_from(&h_theta);
    row3.view_mut((0, crate::state::idx::P_I), (3, 3)).copy_from(&(-Mat3::identity()));
    row3.view_mut((0, ROBO_DIM), (3, 3)).copy_from(&Mat3::identity());
    let pi = h_p * c_l;
    let pi_dyn = DMat::from_fn(2, 3, |i, j| pi[(i, j)]);
    Some(pi_dyn * row3)
}

/// Post-composition row of the analysis model (the linear landmark
/// measurement mapped through V̌Ψ; only the landmark block row survives Ȟ).
fn composed_row(sample: &TrajectorySample, landmark: &Vec3) -> DMat {
    let c_l = sample.q_rel.to_matrix();
    let p_l_new = c_l * (landmark - sample.p_rel);
    let mut row = DMat::zeros(3, OBS_DIM);
    row.view_mut((0, crate::state::idx::THETA_I), (3, 3)).copy_from(&skew(&p_l_new));
    row.view_mut((0, crate::state::idx::P_I), (3, 3)).copy_from(&(-c_l));
    row.view_mut((0, ROBO_DIM), (3, 3)).copy_from(&c_l);
    row
}

/// The nine claimed unobservable directions: global orientation, global
/// position, and the joint sensor/landmark translation.
pub fn claimed_nullspace() -> DMat {
    let mut n = DMat::zeros(OBS_DIM, 9);
    for i in 0..3 {
        n[(crate::state::idx::THETA_G + i, i)] = 1.0;
        n[(crate::state::idx::P_G + i, 3 + i)] = 1.0;
        n[(crate::state::idx::P_I + i, 6 + i)] = 1.0;
        n[(ROBO_DIM + i, 6 + i)] = 1.0;
    }
    n
}

/// Scale direction of Lemma-1 form, assembled from the window-start values
/// of the history: `[0, p_G, 0, 0, p_I, v_I, 0, −a_I, p_L]`.
pub fn scale_direction(history: &StateHistory, landmark: &Vec3) -> DVec {
    let s0 = &history.samples[0];
    let mut u = DVec::zeros(OBS_DIM);
    let put = |u: &mut DVec, off: usize, v: &Vec3| {
        u[off] = v.x;
        u[off + 1] = v.y;
        u[off + 2] = v.z;
    };
    use crate::state::idx::*;
    put(&mut u, P_G, &history.p_global);
    put(&mut u, P_I, &s0.p_rel);
    put(&mut u, VEL, &s0.v_body);
    put(&mut u, BA, &(-s0.accel_body));
    put(&mut u, ROBO_DIM, landmark);
    u
}

/// Motion labels used to pick the expected nullity in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MotionLabel {
    pub no_rotation: bool,
    pub constant_acceleration: bool,
    pub stationary: bool,
    pub planar: bool,
}

impl MotionLabel {
    pub fn class(&self) -> &'static str {
        if self.stationary {
            "stationary"
        } else if self.no_rotation && self.constant_acceleration {
            "no_rotation_constant_acceleration"
        } else if self.no_rotation {
            "no_rotation"
        } else if self.planar {
            "planar"
        } else {
            "generic"
        }
    }
}

/// Labels a trajectory by thresholding the angular rate, the variation of
/// body-frame acceleration, and the out-of-plane body components (rotation
/// about the body z axis only, translation in the body x-y plane).
pub fn motion_classifier(history: &StateHistory) -> MotionLabel {
    let tol = 1e-6;
    let a0 = history.samples[0].accel_body;
    let mut max_w: f64 = 0.0;
    let mut max_da: f64 = 0.0;
    let mut max_v: f64 = 0.0;
    let mut max_a: f64 = 0.0;
    let mut max_w_xy: f64 = 0.0;
    let mut max_out_of_plane: f64 = 0.0;
    for s in &history.samples {
        max_w = max_w.max(s.omega_body.norm());
        max_da = max_da.max((s.accel_body - a0).norm());
        max_v = max_v.max(s.v_body.norm());
        max_a = max_a.max(s.accel_body.norm());
        max_w_xy = max_w_xy.max(s.omega_body.xy().norm());
        max_out_of_plane = max_out_of_plane.max(s.v_body.z.abs().max(s.accel_body.z.abs()));
    }
    MotionLabel {
        no_rotation: max_w < tol,
        constant_acceleration: max_da < tol,
        stationary: max_v < tol && max_a < tol && max_w < tol,
        planar: max_w_xy < tol && max_out_of_plane < tol,
    }
}

/// Observability matrix with its numeric nullspace analysis.
#[derive(Debug, Clone)]
pub struct ObservabilityReport {
    pub m: DMat,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub nullity: usize,
    /// Orthonormal basis of the numeric nullspace (columns).
    pub nullspace: DMat,
    /// ‖M n̂‖ / ‖M‖ for each of the nine claimed directions.
    pub claimed_direction_residuals: Vec<f64>,
    /// ‖M u‖ / (‖M‖ ‖u‖) for the scale direction.
    pub scale_residual: f64,
    pub motion: MotionLabel,
    pub include_composition: bool,
}

/// Flat summary for CSV/JSON emission.
#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub scenario: String,
    pub include_composition: bool,
    pub rows: usize,
    pub rank: usize,
    pub nullity: usize,
    pub motion_class: String,
    pub scale_residual: f64,
    pub max_claimed_direction_residual: f64,
    pub singular_values: Vec<f64>,
}

impl ObservabilityReport {
    pub fn summary(&self, scenario: &str) -> ReportSummary {
        ReportSummary {
            scenario: scenario.to_string(),
            include_composition: self.include_composition,
            rows: self.m.nrows(),
            rank: self.rank,
            nullity: self.nullity,
            motion_class: self.motion.class().to_string(),
            scale_residual: self.scale_residual,
            max_claimed_direction_residual: self
                .claimed_direction_residuals
                .iter()
                .cloned()
                .fold(0.0, f64::max),
            singular_values: self.singular_values.clone(),
        }
    }
}

/// Builds the stacked observability matrix over `steps` epochs of the
/// history and analyzes its nullspace.
///
/// `rank_tol` scales the largest singular value to split rank from nullity
/// (1e-8 by default in the harness).
pub fn build_observability_matrix(
    history: &StateHistory,
    landmark: &Vec3,
    steps: usize,
    include_composition: bool,
    rank_tol: f64,
) -> Result<ObservabilityReport> {
    let n = history.samples.len();
    if n < 2 || steps == 0 {
        return Err(Error::HistoryTooSparse(n));
    }
    let indices: Vec<usize> = (0..=steps).map(|i| i * (n - 1) / steps).collect();
    let transitions = analytic_phi_sequence(history, &indices)?;

    let rows_per = if include_composition { 3 } else { 2 };
    let mut rows: Vec<DMat> = Vec::new();
    for (idx, tr) in indices.iter().zip(&transitions) {
        let sample = &history.samples[*idx];
        let psi = tr.psi();
        if include_composition {
            rows.push(composed_row(sample, landmark) * &psi);
        } else if let Some(h) = measurement_row(sample, landmark) {
            rows.push(h * &psi);
        }
    }
    if rows.is_empty() {
        return Err(Error::HistoryTooSparse(n));
    }
    let mut m = DMat::zeros(rows.len() * rows_per, OBS_DIM);
    for (i, r) in rows.iter().enumerate() {
        m.view_mut((i * rows_per, 0), (rows_per, OBS_DIM)).copy_from(r);
    }

    // Pad with zero rows so the SVD always carries a full 27-row Vᵀ and the
    // whole nullspace is spanned even for short stacks.
    let m_svd = if m.nrows() < OBS_DIM {
        let mut padded = DMat::zeros(OBS_DIM, OBS_DIM);
        padded.view_mut((0, 0), (m.nrows(), OBS_DIM)).copy_from(&m);
        padded
    } else {
        m.clone()
    };
    let svd = nalgebra::SVD::new(m_svd, false, true);
    let mut singular: Vec<f64> = svd.singular_values.iter().cloned().collect();
    singular.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let smax = singular.first().cloned().unwrap_or(0.0);
    let rank = singular.iter().filter(|s| **s > rank_tol * smax).count();
    let v_t = svd.v_t.expect("requested V^T");
    let nullity = OBS_DIM - rank;
    let mut nullspace = DMat::zeros(OBS_DIM, nullity);
    let sv = &svd.singular_values;
    let mut col = 0;
    for i in 0..v_t.nrows() {
        if sv[i] <= rank_tol * smax && col < nullity {
            nullspace.column_mut(col).copy_from(&v_t.row(i).transpose());
            col += 1;
        }
    }
    let nullspace = nullspace.columns(0, col).clone_owned();

    let m_norm = smax.max(1e-300);
    let claimed = claimed_nullspace();
    let claimed_direction_residuals: Vec<f64> = (0..claimed.ncols())
        .map(|c| {
            let dir = claimed.column(c).clone_owned();
            (&m * &dir).norm() / (m_norm * dir.norm())
        })
        .collect();
    let u = scale_direction(history, landmark);
    let scale_residual = if u.norm() > 0.0 { (&m * &u).norm() / u.norm() } else { 0.0 };

    Ok(ObservabilityReport {
        m,
        singular_values: singular,
        rank,
        nullity,
        nullspace,
        claimed_direction_residuals,
        scale_residual,
        motion: motion_classifier(history),
        include_composition,
    })
}

/// Principal angles (radians) between the column spans of two bases.
pub fn principal_angles(a: &DMat, b: &DMat) -> Vec<f64> {
    let qa = orthonormalize(a);
    let qb = orthonormalize(b);
    let m = qa.transpose() * qb;
    let svd = nalgebra::SVD::new(m, false, false);
    svd.singular_values.iter().map(|s| s.min(1.0).acos()).collect()
}

fn orthonormalize(a: &DMat) -> DMat {
    let qr = a.clone().qr();
    let q = qr.q();
    let r = qr.r();
    // Keep columns with nonzero diagonal in R (independent directions).
    let mut keep = Vec::new();
    for i in 0..r.nrows().min(r.ncols()) {
        if r[(i, i)].abs() > 1e-12 {
            keep.push(i);
        }
    }
    let mut out = DMat::zeros(a.nrows(), keep.len());
    for (j, i) in keep.iter().enumerate() {
        out.column_mut(j).copy_from(&q.column(*i));
    }
    out
}
