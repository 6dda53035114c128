//! Constant-velocity Kalman filter over `(cx, cy, aspect, height)` and their
//! velocities.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

pub type StateVector = SVector<f64, 8>;
pub type StateCovariance = SMatrix<f64, 8, 8>;
pub type Measurement = SVector<f64, 4>;

const MIN_HEIGHT: f64 = 1e-3;

/// Noise model. Position and velocity noise scale with the box height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanParams {
    pub std_weight_position: f64,
    pub std_weight_velocity: f64,
}

impl Default for KalmanParams {
    fn default() -> Self {
        Self {
            std_weight_position: 1.0 / 20.0,
            std_weight_velocity: 1.0 / 160.0,
        }
    }
}

/// Mean and covariance of one track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub mean: StateVector,
    pub covariance: StateCovariance,
}

impl TrackState {
    pub fn center(&self) -> (f64, f64) {
        (self.mean[0], self.mean[1])
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.mean[4], self.mean[5])
    }

    pub fn height(&self) -> f64 {
        self.mean[3].max(MIN_HEIGHT)
    }

    pub fn to_bbox(&self) -> BBox {
        let h = self.height();
        let w = (self.mean[2] * h).max(MIN_HEIGHT);
        BBox::from_center(self.mean[0], self.mean[1], w, h)
            .expect("positive extent and finite center")
    }
}

pub fn measurement_of(b: &BBox) -> Measurement {
    let (cx, cy) = b.center();
    Measurement::new(cx, cy, b.width() / b.height(), b.height())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KalmanFilter {
    params: KalmanParams,
}

fn diag_sq(std: [f64; 8]) -> StateCovariance {
    StateCovariance::from_diagonal(&SVector::from(std.map(|s| s * s)))
}

fn observation() -> SMatrix<f64, 4, 8> {
    SMatrix::<f64, 4, 8>::identity()
}

impl KalmanFilter {
    pub fn new(params: KalmanParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> KalmanParams {
        self.params
    }

    /// New state from an unassociated measurement, zero velocity.
    pub fn initiate(&self, b: &BBox) -> TrackState {
        let z = measurement_of(b);
        let mut mean = StateVector::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from(&z);
        let h = z[3];
        let wp = self.params.std_weight_position;
        let wv = self.params.std_weight_velocity;
        let covariance = diag_sq([
            2.0 * wp * h,
            2.0 * wp * h,
            1e-2,
            2.0 * wp * h,
            10.0 * wv * h,
            10.0 * wv * h,
            1e-5,
            10.0 * wv * h,
        ]);
        TrackState { mean, covariance }
    }

    /// Advances the state `dt` frames under constant velocity.
    pub fn predict(&self, state: &mut TrackState, dt: u64) {
        let dt = dt as f64;
        let mut motion = StateCovariance::identity();
        for i in 0..4 {
            motion[(i, i + 4)] = dt;
        }
        let h = state.height();
        let wp = self.params.std_weight_position;
        let wv = self.params.std_weight_velocity;
        let noise = diag_sq([
            wp * h,
            wp * h,
            1e-2,
            wp * h,
            wv * h,
            wv * h,
            1e-5,
            wv * h,
        ]) * dt;
        state.mean = motion * state.mean;
        state.covariance = motion * state.covariance * motion.transpose() + noise;
        symmetrize(&mut state.covariance);
    }

    /// Corrects the state with an associated measurement.
    pub fn update(&self, state: &mut TrackState, b: &BBox) {
        let z = measurement_of(b);
        let obs = observation();
        let h = state.height();
        let wp = self.params.std_weight_position;
        let r = SMatrix::<f64, 4, 4>::from_diagonal(&SVector::from(
            [wp * h, wp * h, 1e-1, wp * h].map(|s| s * s),
        ));
        let projected_cov = obs * state.covariance * obs.transpose() + r;
        let Some(chol) = projected_cov.cholesky() else {
            // Innovation covariance is R plus a PSD term; only reachable
            // with non-finite input. Fall back to taking the measurement.
            state.mean.fixed_rows_mut::<4>(0).copy_from(&z);
            return;
        };
        // K = P Hᵀ S⁻¹, computed as (S⁻¹ H P)ᵀ since P and S are symmetric.
        let gain = chol.solve(&(obs * state.covariance)).transpose();
        let innovation = z - obs * state.mean;
        state.mean += gain * innovation;
        state.covariance -= gain * projected_cov * gain.transpose();
        symmetrize(&mut state.covariance);
    }
}

fn symmetrize(m: &mut StateCovariance) {
    *m = (*m + m.transpose()) * 0.5;
}
