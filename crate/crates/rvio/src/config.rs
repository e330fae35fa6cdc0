//! Run configuration: a single TOML file with dotted sections.
//!
//! Every key has a default; unknown keys are a hard error so typos cannot
//! silently fall back to defaults.

use crate::so3::UnitQuat;
use crate::state::{CameraImuExtrinsics, FilterParams, NoiseConfig};
use crate::{Error, Result, Vec3};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    /// Sliding-window capacity N_max.
    pub window: usize,
    pub gravity_mag: f64,
    /// Principal-point degeneracy threshold, normalized units.
    pub eps_pp: f64,
    /// Low-parallax threshold, meters.
    pub eps_par: f64,
    /// Mahalanobis gate significance level.
    pub chi2_alpha: f64,
    pub gn_step_tol: f64,
    pub gn_max_iters: usize,
    /// Stationary initialization window, seconds.
    pub init_window_sec: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            window: 20,
            gravity_mag: 9.81,
            eps_pp: 1e-3,
            eps_par: 0.01,
            chi2_alpha: 0.05,
            gn_step_tol: 1e-8,
            gn_max_iters: 10,
            init_window_sec: 1.0,
        }
    }
}

/// Continuous-time sensor noise densities. Image noise is configured in
/// pixels and converted to normalized coordinates at ingestion.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub sigma_g: f64,
    pub sigma_wg: f64,
    pub sigma_a: f64,
    pub sigma_wa: f64,
    pub sigma_im_px: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            sigma_g: 1.122e-4,
            sigma_wg: 5.6323e-6,
            sigma_a: 5.0119e-4,
            sigma_wa: 3.9811e-5,
            sigma_im_px: 1.5,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSection {
    pub focal_px: f64,
    pub width_px: u32,
    pub height_px: u32,
    pub fov_deg: f64,
}

impl Default for CameraSection {
    fn default() -> Self {
        CameraSection { focal_px: 460.0, width_px: 640, height_px: 480, fov_deg: 45.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtrinsicsSection {
    /// Camera-to-IMU rotation `^C_I q`, scalar last.
    pub q_cam_imu: [f64; 4],
    /// IMU position in the camera frame `^C p_I`, meters.
    pub p_imu_in_cam: [f64; 3],
}

impl Default for ExtrinsicsSection {
    fn default() -> Self {
        ExtrinsicsSection { q_cam_imu: [0.0, 0.0, 0.0, 1.0], p_imu_in_cam: [0.0, 0.0, 0.0] }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    /// circle | stationary | planar | no_rotation_decel | waypoints
    pub kind: String,
    pub radius: f64,
    pub speed: f64,
    pub duration: f64,
    pub imu_rate: f64,
    pub cam_rate: f64,
    /// cylinder | random_box
    pub placement: String,
    pub cylinder_radius: f64,
    pub cylinder_half_height: f64,
    pub box_half_extent: f64,
    pub feature_count: usize,
    /// Stationary segment at the start used for initialization, seconds.
    pub init_hold_sec: f64,
    /// Smoothstep speed ramp after the hold, seconds.
    pub ramp_sec: f64,
    /// Waypoints for kind = "waypoints", meters.
    pub waypoints: Vec<[f64; 3]>,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            kind: "circle".into(),
            radius: 5.0,
            speed: 1.0,
            duration: 60.0,
            imu_rate: 200.0,
            cam_rate: 10.0,
            placement: "cylinder".into(),
            cylinder_radius: 6.0,
            cylinder_half_height: 1.5,
            box_half_extent: 5.0,
            feature_count: 1500,
            init_hold_sec: 1.0,
            ramp_sec: 2.0,
            waypoints: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub trials: usize,
    pub seed: u64,
    /// none | yaw_position | se3
    pub alignment: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { trials: 50, seed: 42, alignment: "none".into() }
    }
}

/// Top-level configuration for all CLI subcommands.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub filter: FilterSection,
    pub noise: NoiseSection,
    pub camera: CameraSection,
    pub extrinsics: ExtrinsicsSection,
    pub sim: SimSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.noise_config().validate()?;
        if self.filter.window < 2 {
            return Err(Error::Config("filter.window must be at least 2".into()));
        }
        if self.sim.imu_rate < self.sim.cam_rate || self.sim.cam_rate <= 0.0 {
            return Err(Error::Config("sim rates must be positive with imu_rate >= cam_rate".into()));
        }
        if self.camera.fov_deg <= 0.0 || self.camera.fov_deg >= 180.0 {
            return Err(Error::Config("camera.fov_deg must be in (0, 180)".into()));
        }
        if self.sim.kind == "circle" && self.sim.cylinder_radius <= self.sim.radius {
            return Err(Error::Config(
                "sim.cylinder_radius must exceed sim.radius for the circle scenario".into(),
            ));
        }
        match self.run.alignment.as_str() {
            "none" | "yaw_position" | "se3" => {}
            other => return Err(Error::Config(format!("unknown alignment '{other}'"))),
        }
        match self.sim.kind.as_str() {
            "circle" | "stationary" | "planar" | "no_rotation_decel" | "waypoints" => {}
            other => return Err(Error::Config(format!("unknown sim.kind '{other}'"))),
        }
        match self.sim.placement.as_str() {
            "cylinder" | "random_box" => {}
            other => return Err(Error::Config(format!("unknown placement '{other}'"))),
        }
        Ok(())
    }

    pub fn filter_params(&self) -> FilterParams {
        FilterParams {
            n_max: self.filter.window,
            gravity_mag: self.filter.gravity_mag,
            eps_pp: self.filter.eps_pp,
            eps_par: self.filter.eps_par,
            chi2_alpha: self.filter.chi2_alpha,
            gn_step_tol: self.filter.gn_step_tol,
            gn_max_iters: self.filter.gn_max_iters,
        }
    }

    pub fn noise_config(&self) -> NoiseConfig {
        NoiseConfig {
            sigma_g: self.noise.sigma_g,
            sigma_wg: self.noise.sigma_wg,
            sigma_a: self.noise.sigma_a,
            sigma_wa: self.noise.sigma_wa,
            sigma_im: self.noise.sigma_im_px / self.camera.focal_px,
        }
    }

    pub fn extrinsics(&self) -> CameraImuExtrinsics {
        let q = self.extrinsics.q_cam_imu;
        CameraImuExtrinsics {
            q_cam_imu: UnitQuat::new(q[0], q[1], q[2], q[3]),
            p_imu_in_cam: Vec3::new(
                self.extrinsics.p_imu_in_cam[0],
                self.extrinsics.p_imu_in_cam[1],
                self.extrinsics.p_imu_in_cam[2],
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.filter.window, 20);
        assert_eq!(cfg.sim.kind, "circle");
        assert_eq!(cfg.run.trials, 50);
    }

    #[test]
    fn dotted_keys_accepted() {
        let cfg = RunConfig::from_toml("sim.radius = 4.0\nnoise.sigma_g = 2e-4\n").unwrap();
        assert_eq!(cfg.sim.radius, 4.0);
        assert_eq!(cfg.noise.sigma_g, 2e-4);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sim.radiuss = 4.0").is_err());
        assert!(RunConfig::from_toml("[typo]\nx = 1").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("noise.sigma_g = -1.0").is_err());
        assert!(RunConfig::from_toml("sim.cylinder_radius = 4.0").is_err());
        assert!(RunConfig::from_toml("run.alignment = 'sim3'").is_err());
    }

    #[test]
    fn image_noise_normalized_by_focal() {
        let cfg = RunConfig::from_toml("noise.sigma_im_px = 2.3\ncamera.focal_px = 500.0").unwrap();
        let n = cfg.noise_config();
        assert!((n.sigma_im - 2.3 / 500.0).abs() < 1e-15);
    }
}
