//! Constant-velocity Kalman filter over box state
//! `(cx, cy, aspect, height)` plus velocities.

use crate::bbox::BBox;
use nalgebra::{SMatrix, SVector};

use super::AssocError;

type State = SVector<f64, 8>;
type StateCov = SMatrix<f64, 8, 8>;
type Meas = SVector<f64, 4>;
type MeasCov = SMatrix<f64, 4, 4>;
type CrossCov = SMatrix<f64, 8, 4>;

/// Noise scales relative to the box height. Zeroing the position weight
/// makes predictions exact under truly linear motion.
#[derive(Clone, Copy, Debug)]
pub struct MotionConfig {
    pub std_weight_pos: f64,
    pub std_weight_vel: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            std_weight_pos: 1.0 / 20.0,
            std_weight_vel: 1.0 / 160.0,
        }
    }
}

impl MotionConfig {
    /// No process or measurement noise on observed components; velocity
    /// uncertainty stays so the filter can lock onto linear motion.
    pub fn zero_noise() -> Self {
        MotionConfig {
            std_weight_pos: 0.0,
            std_weight_vel: 1.0 / 160.0,
        }
    }
}

/// Filter state of one track.
#[derive(Clone, Debug)]
pub struct MotionState {
    mean: State,
    cov: StateCov,
}

fn measurement(b: &BBox) -> Result<Meas, AssocError> {
    let (w, h) = (b.width(), b.height());
    if w <= 0.0 || h <= 0.0 {
        return Err(AssocError::NonPositiveExtent { w, h });
    }
    let (cx, cy) = b.center();
    Ok(Meas::from([cx, cy, w / h, h]))
}

fn transition() -> StateCov {
    let mut f = StateCov::identity();
    for i in 0..4 {
        f[(i, 4 + i)] = 1.0;
    }
    f
}

impl MotionState {
    /// Starts a track from its first observation with zero velocity.
    pub fn initiate(cfg: &MotionConfig, bbox: &BBox) -> Result<Self, AssocError> {
        let z = measurement(bbox)?;
        let h = z[3];
        let mut mean = State::zeros();
        for i in 0..4 {
            mean[i] = z[i];
        }
        let std = [
            2.0 * cfg.std_weight_pos * h,
            2.0 * cfg.std_weight_pos * h,
            1e-2,
            2.0 * cfg.std_weight_pos * h,
            10.0 * cfg.std_weight_vel * h,
            10.0 * cfg.std_weight_vel * h,
            1e-5,
            10.0 * cfg.std_weight_vel * h,
        ];
        let mut cov = StateCov::zeros();
        for (i, s) in std.iter().enumerate() {
            cov[(i, i)] = s * s;
        }
        Ok(MotionState { mean, cov })
    }

    /// Advances one frame: `x <- F x`, `P <- F P F' + Q`.
    pub fn predict(&mut self, cfg: &MotionConfig) {
        let h = self.mean[3].abs().max(1e-6);
        let f = transition();
        self.mean = f * self.mean;
        let std = [
            cfg.std_weight_pos * h,
            cfg.std_weight_pos * h,
            1e-2,
            cfg.std_weight_pos * h,
            cfg.std_weight_vel * h,
            cfg.std_weight_vel * h,
            1e-5,
            cfg.std_weight_vel * h,
        ];
        let mut q = StateCov::zeros();
        for (i, s) in std.iter().enumerate() {
            q[(i, i)] = s * s;
        }
        self.cov = f * self.cov * f.transpose() + q;
    }

    /// Folds in an observation.
    pub fn update(&mut self, cfg: &MotionConfig, bbox: &BBox) -> Result<(), AssocError> {
        let z = measurement(bbox)?;
        let h = self.mean[3].abs().max(1e-6);
        let r_std = [
            cfg.std_weight_pos * h,
            cfg.std_weight_pos * h,
            1e-1,
            cfg.std_weight_pos * h,
        ];
        let mut r = MeasCov::zeros();
        for (i, s) in r_std.iter().enumerate() {
            r[(i, i)] = s * s;
        }
        // H selects the first four components
        let p_ht: CrossCov = self.cov.fixed_view::<8, 4>(0, 0).into_owned();
        let mut s: MeasCov = self.cov.fixed_view::<4, 4>(0, 0) + r;
        // tiny ridge keeps the solve defined once the filter converges to
        // zero uncertainty in the noise-free configuration
        for i in 0..4 {
            s[(i, i)] += 1e-12;
        }
        let s_inv = s.try_inverse().ok_or(AssocError::SingularInnovation)?;
        let gain: CrossCov = p_ht * s_inv;
        let innovation = z - self.mean.fixed_rows::<4>(0);
        self.mean += gain * innovation;
        let mut kh = StateCov::zeros();
        for row in 0..8 {
            for col in 0..4 {
                kh[(row, col)] = gain[(row, col)];
            }
        }
        self.cov = (StateCov::identity() - kh) * self.cov;
        // keep the covariance symmetric against floating-point drift
        self.cov = (self.cov + self.cov.transpose()) * 0.5;
        Ok(())
    }

    /// Box implied by the current mean.
    pub fn current_box(&self) -> BBox {
        let (cx, cy, a, h) = (self.mean[0], self.mean[1], self.mean[2], self.mean[3]);
        let w = a * h;
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    /// Standard deviation of the predicted center position.
    pub fn position_std(&self) -> (f64, f64) {
        (self.cov[(0, 0)].max(0.0).sqrt(), self.cov[(1, 1)].max(0.0).sqrt())
    }

    pub fn covariance(&self) -> &StateCov {
        &self.cov
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.mean[4], self.mean[5])
    }
}
