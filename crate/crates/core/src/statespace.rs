//! Nine-dimensional flight state and the linear-Gaussian filter steps.
//!
//! The state stacks position, velocity, and acceleration in that order; the
//! transition matrix treats acceleration as locally constant between frames
//! and the observation matrix selects only the acceleration block.

use crate::error::{Error, Result};
use crate::trajectory::{StateSample, Trajectory};
use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec9 = SVector<f64, 9>;
pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Mat3x9 = SMatrix<f64, 3, 9>;
pub type Mat9x3 = SMatrix<f64, 9, 3>;

/// Gravitational acceleration, m/s².
pub const GRAVITY: f64 = 9.81;

/// Condition-number limit for the 3×3 innovation solve.
pub const INNOVATION_COND_LIMIT: f64 = 1e12;

/// Flight state: position (m), velocity (m/s), acceleration (m/s²).
///
/// Field order matches the row/column order of the transition matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State9 {
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
}

impl State9 {
    pub fn new(p: [f64; 3], v: [f64; 3], a: [f64; 3]) -> Self {
        State9 {
            px: p[0],
            py: p[1],
            pz: p[2],
            vx: v[0],
            vy: v[1],
            vz: v[2],
            ax: a[0],
            ay: a[1],
            az: a[2],
        }
    }

    pub fn zeros() -> Self {
        State9::from_array([0.0; 9])
    }

    pub fn from_array(a: [f64; 9]) -> Self {
        State9 {
            px: a[0],
            py: a[1],
            pz: a[2],
            vx: a[3],
            vy: a[4],
            vz: a[5],
            ax: a[6],
            ay: a[7],
            az: a[8],
        }
    }

    pub fn to_array(self) -> [f64; 9] {
        [
            self.px, self.py, self.pz, self.vx, self.vy, self.vz, self.ax, self.ay, self.az,
        ]
    }

    pub fn from_vector(v: &Vec9) -> Self {
        State9::from_array([v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]])
    }

    pub fn to_vector(self) -> Vec9 {
        Vec9::from_column_slice(&self.to_array())
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.px, self.py, self.pz)
    }

    pub fn velocity(&self) -> Vector3<f64> {
        Vector3::new(self.vx, self.vy, self.vz)
    }

    pub fn acceleration(&self) -> Vector3<f64> {
        Vector3::new(self.ax, self.ay, self.az)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// 9×9 covariance; kept symmetric positive semi-definite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Covariance9(Mat9);

impl Covariance9 {
    /// Validates symmetry (1e-9 relative) and positive semi-definiteness
    /// (eigenvalues ≥ −1e-9·|trace|).
    pub fn new(m: Mat9) -> Result<Self> {
        let max_abs = m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
        let mut max_asym = 0.0_f64;
        for i in 0..9 {
            for j in (i + 1)..9 {
                max_asym = max_asym.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if max_asym > 1e-9 * (1.0 + max_abs) {
            return Err(Error::numerical(format!(
                "covariance asymmetry {max_asym:.3e} exceeds tolerance"
            )));
        }
        let sym = symmetrize(&m);
        let eig = sym.symmetric_eigenvalues();
        let min_eig = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let trace = sym.trace();
        if min_eig < -1e-9 * trace.abs() {
            return Err(Error::numerical(format!(
                "covariance not PSD: min eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(Covariance9(sym))
    }

    /// Wraps a matrix produced by operations that preserve symmetry/PSD.
    pub(crate) fn from_symmetric_unchecked(m: Mat9) -> Self {
        Covariance9(m)
    }

    pub fn from_diagonal(diag: [f64; 9]) -> Self {
        Covariance9(Mat9::from_diagonal(&Vec9::from_column_slice(&diag)))
    }

    pub fn identity() -> Self {
        Covariance9(Mat9::identity())
    }

    pub fn matrix(&self) -> &Mat9 {
        &self.0
    }

    pub fn diagonal(&self) -> [f64; 9] {
        let d = self.0.diagonal();
        let mut out = [0.0; 9];
        out.copy_from_slice(d.as_slice());
        out
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

/// Gaussian belief over the flight state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterBelief {
    pub mean: State9,
    pub cov: Covariance9,
    /// Belief timestamp in seconds.
    pub time: f64,
}

impl FilterBelief {
    pub fn new(mean: State9, cov: Covariance9, time: f64) -> Self {
        FilterBelief { mean, cov, time }
    }
}

/// Diagonal process noise added at every prediction step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessNoise {
    pub diag: [f64; 9],
}

impl ProcessNoise {
    pub fn new(diag: [f64; 9]) -> Result<Self> {
        if diag.iter().any(|q| !q.is_finite() || *q < 0.0) {
            return Err(Error::invalid("process noise entries must be finite and >= 0"));
        }
        Ok(ProcessNoise { diag })
    }

    pub fn zeros() -> Self {
        ProcessNoise { diag: [0.0; 9] }
    }

    pub fn matrix(&self) -> Mat9 {
        Mat9::from_diagonal(&Vec9::from_column_slice(&self.diag))
    }
}

impl Default for ProcessNoise {
    /// Per-step noise at 120 Hz; acceleration is the least-trusted block.
    fn default() -> Self {
        ProcessNoise {
            diag: [1e-6, 1e-6, 1e-6, 1e-4, 1e-4, 1e-4, 1e-2, 1e-2, 1e-2],
        }
    }
}

/// A 3-vector acceleration observation with its covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccelMeasurement {
    /// Observed acceleration, m/s².
    pub z: Vector3<f64>,
    /// Measurement covariance, m²/s⁴; symmetric positive definite.
    pub r: Matrix3<f64>,
}

impl AccelMeasurement {
    pub fn new(z: Vector3<f64>, r: Matrix3<f64>) -> Result<Self> {
        if z.iter().any(|x| !x.is_finite()) || r.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("measurement entries must be finite"));
        }
        if (r - r.transpose()).abs().max() > 1e-9 * (1.0 + r.abs().max()) {
            return Err(Error::invalid("measurement covariance must be symmetric"));
        }
        if r.symmetric_eigenvalues().iter().any(|l| *l <= 0.0) {
            return Err(Error::invalid("measurement covariance must be positive definite"));
        }
        Ok(AccelMeasurement { z, r })
    }
}

pub fn symmetrize(m: &Mat9) -> Mat9 {
    (m + m.transpose()) * 0.5
}

/// Constant-acceleration transition matrix for a step of `dt` seconds.
///
/// Identity diagonal, `dt` on the position←velocity and velocity←acceleration
/// couplings, `dt²/2` on the position←acceleration couplings.
pub fn make_transition_matrix(dt: f64) -> Result<Mat9> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let mut a = Mat9::identity();
    let half_dt2 = 0.5 * dt * dt;
    for i in 0..3 {
        a[(i, i + 3)] = dt;
        a[(i + 3, i + 6)] = dt;
        a[(i, i + 6)] = half_dt2;
    }
    Ok(a)
}

/// Observation matrix selecting the acceleration block of the state.
pub fn observation_matrix() -> Mat3x9 {
    let mut c = Mat3x9::zeros();
    c[(0, 6)] = 1.0;
    c[(1, 7)] = 1.0;
    c[(2, 8)] = 1.0;
    c
}

/// Initial belief for filtering: the first observed (finite-difference)
/// state with diagonal covariance 1e-4 (position), 1e-2 (velocity),
/// 1.0 (acceleration).
pub fn initial_belief(state: State9, time: f64) -> FilterBelief {
    let cov = Covariance9::from_diagonal([1e-4, 1e-4, 1e-4, 1e-2, 1e-2, 1e-2, 1.0, 1.0, 1.0]);
    FilterBelief::new(state, cov, time)
}

/// Kalman prediction: mean ← A·mean, cov ← A·cov·Aᵀ + Q.
///
/// The step length is read from the position←velocity coupling of `a`.
pub fn predict_step(belief: &FilterBelief, a: &Mat9, q: &ProcessNoise) -> FilterBelief {
    let dt = a[(0, 3)];
    let mean = a * belief.mean.to_vector();
    let cov = a * belief.cov.matrix() * a.transpose() + q.matrix();
    FilterBelief {
        mean: State9::from_vector(&mean),
        cov: Covariance9::from_symmetric_unchecked(symmetrize(&cov)),
        time: belief.time + dt,
    }
}

/// Kalman measurement step against an acceleration observation.
///
/// Returns the posterior belief and the 9×3 gain. Fails when the innovation
/// matrix C·Σ̄·Cᵀ + R is singular or conditioned worse than 1e12.
pub fn update_step(belief: &FilterBelief, meas: &AccelMeasurement) -> Result<(FilterBelief, Mat9x3)> {
    let c = observation_matrix();
    let sigma = belief.cov.matrix();
    let s_raw = c * sigma * c.transpose() + meas.r;
    let s = (s_raw + s_raw.transpose()) * 0.5;

    let eig = nalgebra::SymmetricEigen::new(s);
    let max_l = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_l = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_l <= 0.0 || max_l / min_l > INNOVATION_COND_LIMIT {
        return Err(Error::numerical(format!(
            "innovation matrix ill-conditioned: eigenvalues [{min_l:.3e}, {max_l:.3e}]"
        )));
    }
    let inv_l = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    let s_inv = eig.eigenvectors * inv_l * eig.eigenvectors.transpose();

    let gain: Mat9x3 = sigma * c.transpose() * s_inv;
    let innovation = meas.z - c * belief.mean.to_vector();
    let mean = belief.mean.to_vector() + gain * innovation;
    let cov = (Mat9::identity() - gain * c) * sigma;
    let posterior = FilterBelief {
        mean: State9::from_vector(&mean),
        cov: Covariance9::from_symmetric_unchecked(symmetrize(&cov)),
        time: belief.time,
    };
    Ok((posterior, gain))
}

/// Gravity-only ballistic rollout: repeated mean propagation with the
/// acceleration pinned to (0, 0, −g).
///
/// Returns `n_steps + 1` samples starting at t = 0 from the given position
/// and velocity.
pub fn newton_rollout(initial: &State9, n_steps: usize, dt: f64) -> Result<Trajectory> {
    if n_steps < 1 {
        return Err(Error::invalid("newton_rollout needs n_steps >= 1"));
    }
    let a = make_transition_matrix(dt)?;
    let mut state = *initial;
    state.ax = 0.0;
    state.ay = 0.0;
    state.az = -GRAVITY;
    let mut samples = Vec::with_capacity(n_steps + 1);
    samples.push(StateSample { time: 0.0, state });
    let mut x = state.to_vector();
    for step in 1..=n_steps {
        x = a * x;
        samples.push(StateSample {
            time: step as f64 * dt,
            state: State9::from_vector(&x),
        });
    }
    Trajectory::new("newton", dt, samples)
}
