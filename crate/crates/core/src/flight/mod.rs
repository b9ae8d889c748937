//! Ground-truth flight simulation under gravity, quadratic drag, and Magnus
//! force, plus dataset generation, augmentation, and differentiation of
//! position-only logs.

mod dataset;

pub use dataset::{import_positions_csv, load_dataset, save_dataset, CsvMapping, Dataset};

use crate::error::{Error, Result};
use crate::statespace::{State9, GRAVITY};
use crate::trajectory::{StateSample, Trajectory};
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Aerodynamic and inertial parameters of one thrown object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectParams {
    /// Mass in kg.
    pub mass: f64,
    /// Dimensionless drag coefficient.
    pub drag_coefficient: f64,
    /// Reference cross-section in m².
    pub reference_area: f64,
    /// Dimensionless Magnus coefficient.
    pub magnus_coefficient: f64,
    /// Spin axis; must be unit length when `spin_rate` is nonzero.
    pub spin_axis: [f64; 3],
    /// Spin rate in rad/s, constant over a flight.
    pub spin_rate: f64,
    /// Air density in kg/m³.
    pub air_density: f64,
}

impl Default for ObjectParams {
    fn default() -> Self {
        ObjectParams {
            mass: 0.15,
            drag_coefficient: 0.8,
            reference_area: 0.004,
            magnus_coefficient: 0.0,
            spin_axis: [0.0, 0.0, 1.0],
            spin_rate: 0.0,
            air_density: 1.2,
        }
    }
}

impl ObjectParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) {
            return Err(Error::invalid("mass must be positive"));
        }
        if self.drag_coefficient < 0.0 {
            return Err(Error::invalid("drag coefficient must be >= 0"));
        }
        if !(self.reference_area > 0.0) {
            return Err(Error::invalid("reference area must be positive"));
        }
        if !(self.air_density >= 0.0) {
            return Err(Error::invalid("air density must be >= 0"));
        }
        if self.spin_rate != 0.0 {
            let norm = Vector3::from(self.spin_axis).norm();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "spin axis must be unit length when spinning, |axis| = {norm}"
                )));
            }
        }
        Ok(())
    }
}

/// Sampling ranges for randomized throws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThrowConfig {
    /// Axis-aligned box for the launch position, meters.
    pub position_min: [f64; 3],
    pub position_max: [f64; 3],
    /// Launch speed range, m/s.
    pub speed_range: [f64; 2],
    /// Elevation angle range above the horizontal, degrees.
    pub launch_angle_range_deg: [f64; 2],
    /// Horizontal launch direction range, degrees; 0 points along +x.
    pub azimuth_range_deg: [f64; 2],
    /// Flight duration in seconds.
    pub duration: f64,
    /// Sample spacing in seconds.
    pub dt: f64,
    /// Motion-capture style position noise σ in meters. When set, positions
    /// are perturbed and velocity/acceleration re-derived by differentiation.
    pub position_noise_std: Option<f64>,
}

impl Default for ThrowConfig {
    fn default() -> Self {
        ThrowConfig {
            position_min: [-0.1, -0.1, 1.4],
            position_max: [0.1, 0.1, 1.6],
            speed_range: [5.0, 6.0],
            launch_angle_range_deg: [25.0, 40.0],
            azimuth_range_deg: [0.0, 0.0],
            duration: 1.0,
            dt: 1.0 / 120.0,
            position_noise_std: None,
        }
    }
}

impl ThrowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::invalid("dt must be positive"));
        }
        if self.duration < self.dt {
            return Err(Error::invalid("duration must be at least dt"));
        }
        let [lo, hi] = self.speed_range;
        if !(0.0..=20.0).contains(&lo) || !(0.0..=20.0).contains(&hi) || lo > hi {
            return Err(Error::invalid("speed range must satisfy 0 <= lo <= hi <= 20 m/s"));
        }
        for k in 0..3 {
            if self.position_min[k] > self.position_max[k] {
                return Err(Error::invalid("position box is empty"));
            }
        }
        if self.launch_angle_range_deg[0] > self.launch_angle_range_deg[1]
            || self.azimuth_range_deg[0] > self.azimuth_range_deg[1]
        {
            return Err(Error::invalid("angle ranges must be non-decreasing"));
        }
        if let Some(s) = self.position_noise_std {
            if !(s >= 0.0) {
                return Err(Error::invalid("position noise std must be >= 0"));
            }
        }
        Ok(())
    }
}

/// Net acceleration on the object: gravity, quadratic drag opposing the
/// velocity, and a Magnus term along spin_axis × v.
pub fn net_acceleration(state: &State9, params: &ObjectParams) -> Vector3<f64> {
    let v = state.velocity();
    let mut a = Vector3::new(0.0, 0.0, -GRAVITY);
    let speed = v.norm();
    if params.drag_coefficient > 0.0 && speed > 0.0 {
        let k = 0.5 * params.air_density * params.drag_coefficient * params.reference_area
            / params.mass;
        a -= k * speed * v;
    }
    if params.magnus_coefficient != 0.0 && params.spin_rate != 0.0 {
        let k = params.magnus_coefficient * params.air_density * params.reference_area
            / params.mass;
        let axis = Vector3::from(params.spin_axis);
        a += k * params.spin_rate * axis.cross(&v);
    }
    a
}

/// Integrates the flight with classical fourth-order Runge–Kutta.
///
/// Each sample's acceleration entries store the instantaneous net
/// acceleration, so generated trajectories double as acceleration oracles.
pub fn simulate_trajectory(
    initial: &State9,
    params: &ObjectParams,
    duration: f64,
    dt: f64,
) -> Result<Trajectory> {
    params.validate()?;
    if !(dt > 0.0) || duration < dt {
        return Err(Error::invalid("need dt > 0 and duration >= dt"));
    }
    let n_steps = (duration / dt).round().max(1.0) as usize;
    let mut p = initial.position();
    let mut v = initial.velocity();
    let mut samples = Vec::with_capacity(n_steps + 1);
    let accel = |p: &Vector3<f64>, v: &Vector3<f64>| {
        let s = State9::new([p.x, p.y, p.z], [v.x, v.y, v.z], [0.0; 3]);
        net_acceleration(&s, params)
    };
    for step in 0..=n_steps {
        let t = step as f64 * dt;
        let a = accel(&p, &v);
        if !(p.iter().all(|x| x.is_finite()) && v.iter().all(|x| x.is_finite())) {
            return Err(Error::SimulationDiverged { time: t });
        }
        samples.push(StateSample {
            time: t,
            state: State9::new([p.x, p.y, p.z], [v.x, v.y, v.z], [a.x, a.y, a.z]),
        });
        if step == n_steps {
            break;
        }
        // RK4 on the coupled system (ṗ = v, v̇ = a(p, v)).
        let (k1p, k1v) = (v, a);
        let (k2p, k2v) = (v + 0.5 * dt * k1v, accel(&(p + 0.5 * dt * k1p), &(v + 0.5 * dt * k1v)));
        let (k3p, k3v) = (v + 0.5 * dt * k2v, accel(&(p + 0.5 * dt * k2p), &(v + 0.5 * dt * k2v)));
        let (k4p, k4v) = (v + dt * k3v, accel(&(p + dt * k3p), &(v + dt * k3v)));
        p += dt / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
        v += dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
    }
    Trajectory::new("sim", dt, samples)
}

/// Generates `n` randomized throws, deterministic in `(throw, params, n, seed)`.
///
/// Each trajectory draws from its own stream seeded by `seed ^ index`, so the
/// result is independent of evaluation order.
pub fn generate_dataset(
    throw: &ThrowConfig,
    params: &ObjectParams,
    n: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    throw.validate()?;
    params.validate()?;
    if n < 1 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    let mut out = Vec::with_capacity(n);
    for index in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index as u64);
        let mut traj = sample_throw(throw, params, &mut rng)?;
        traj.object_id = format!("traj-{index:05}");
        out.push(traj);
    }
    Ok(out)
}

fn sample_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn sample_throw(
    throw: &ThrowConfig,
    params: &ObjectParams,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let p = [
        sample_range(rng, throw.position_min[0], throw.position_max[0]),
        sample_range(rng, throw.position_min[1], throw.position_max[1]),
        sample_range(rng, throw.position_min[2], throw.position_max[2]),
    ];
    let speed = sample_range(rng, throw.speed_range[0], throw.speed_range[1]);
    let elev = sample_range(
        rng,
        throw.launch_angle_range_deg[0],
        throw.launch_angle_range_deg[1],
    )
    .to_radians();
    let azim = sample_range(rng, throw.azimuth_range_deg[0], throw.azimuth_range_deg[1])
        .to_radians();
    let v = [
        speed * elev.cos() * azim.cos(),
        speed * elev.cos() * azim.sin(),
        speed * elev.sin(),
    ];
    let initial = State9::new(p, v, [0.0; 3]);
    let traj = simulate_trajectory(&initial, params, throw.duration, throw.dt)?;
    match throw.position_noise_std {
        Some(sigma) if sigma > 0.0 => {
            let noisy: Vec<(f64, [f64; 3])> = traj
                .samples
                .iter()
                .map(|s| {
                    let mut p = [s.state.px, s.state.py, s.state.pz];
                    for comp in &mut p {
                        *comp += sigma * gaussian(rng);
                    }
                    (s.time, p)
                })
                .collect();
            states_from_positions(&noisy, traj.dt)
        }
        _ => Ok(traj),
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Rotates a trajectory about the Z axis by `yaw`, then translates positions.
/// Velocities and accelerations rotate but do not translate.
pub fn augment(traj: &Trajectory, translation: [f64; 3], yaw: f64) -> Trajectory {
    let (sin, cos) = yaw.sin_cos();
    let rot = |x: f64, y: f64| (cos * x - sin * y, sin * x + cos * y);
    let samples = traj
        .samples
        .iter()
        .map(|s| {
            let st = s.state;
            let (px, py) = rot(st.px, st.py);
            let (vx, vy) = rot(st.vx, st.vy);
            let (ax, ay) = rot(st.ax, st.ay);
            StateSample {
                time: s.time,
                state: State9::new(
                    [px + translation[0], py + translation[1], st.pz + translation[2]],
                    [vx, vy, st.vz],
                    [ax, ay, st.az],
                ),
            }
        })
        .collect();
    Trajectory {
        object_id: traj.object_id.clone(),
        dt: traj.dt,
        samples,
    }
}

/// Recovers full states from timestamped positions by finite differences:
/// central stencils inside, second-order one-sided stencils at the ends.
#[allow(clippy::needless_range_loop)] // index-based stencils read clearer here
pub fn states_from_positions(positions: &[(f64, [f64; 3])], dt: f64) -> Result<Trajectory> {
    let n = positions.len();
    if n < 5 {
        return Err(Error::invalid(format!(
            "need at least 5 position samples, got {n}"
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    for pair in positions.windows(2) {
        let gap = pair[1].0 - pair[0].0;
        if (gap - dt).abs() > 1e-6 * dt.max(1.0) {
            return Err(Error::invalid("positions must be uniformly spaced by dt"));
        }
    }
    let p = |i: usize, k: usize| positions[i].1[k];
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = [0.0; 3];
        let mut a = [0.0; 3];
        for k in 0..3 {
            v[k] = if i == 0 {
                (-3.0 * p(0, k) + 4.0 * p(1, k) - p(2, k)) / (2.0 * dt)
            } else if i == n - 1 {
                (3.0 * p(n - 1, k) - 4.0 * p(n - 2, k) + p(n - 3, k)) / (2.0 * dt)
            } else {
                (p(i + 1, k) - p(i - 1, k)) / (2.0 * dt)
            };
            a[k] = if i == 0 {
                (2.0 * p(0, k) - 5.0 * p(1, k) + 4.0 * p(2, k) - p(3, k)) / (dt * dt)
            } else if i == n - 1 {
                (2.0 * p(n - 1, k) - 5.0 * p(n - 2, k) + 4.0 * p(n - 3, k) - p(n - 4, k))
                    / (dt * dt)
            } else {
                (p(i + 1, k) - 2.0 * p(i, k) + p(i - 1, k)) / (dt * dt)
            };
        }
        samples.push(StateSample {
            time: positions[i].0,
            state: State9::new(positions[i].1, v, a),
        });
    }
    Trajectory::new("derived", dt, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statespace::newton_rollout;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn drag_free() -> ObjectParams {
        ObjectParams {
            drag_coefficient: 0.0,
            magnus_coefficient: 0.0,
            ..ObjectParams::default()
        }
    }

    #[test]
    fn acceleration_at_rest_is_gravity() {
        let a = net_acceleration(&State9::zeros(), &ObjectParams::default());
        assert_relative_eq!(a.z, -GRAVITY);
        assert_relative_eq!(a.x, 0.0);
        let s = State9::new([0.0; 3], [7.0, -2.0, 1.0], [0.0; 3]);
        let a = net_acceleration(&s, &drag_free());
        assert_relative_eq!(a.z, -GRAVITY);
        assert_relative_eq!(a.y, 0.0);
    }

    #[test]
    fn drag_formula_hand_value() {
        let params = ObjectParams {
            mass: 0.15,
            drag_coefficient: 0.8,
            reference_area: 0.004,
            air_density: 1.2,
            ..drag_free()
        };
        let s = State9::new([0.0; 3], [5.0, 0.0, 0.0], [0.0; 3]);
        let a = net_acceleration(&s, &params);
        assert_relative_eq!(a.x, -0.32, epsilon = 1e-12);
    }

    #[test]
    fn magnus_is_perpendicular_to_spin_and_velocity() {
        let params = ObjectParams {
            drag_coefficient: 0.0,
            magnus_coefficient: 0.4,
            spin_axis: [0.0, 0.0, 1.0],
            spin_rate: 30.0,
            ..ObjectParams::default()
        };
        let s = State9::new([0.0; 3], [5.0, 0.0, 0.0], [0.0; 3]);
        let a = net_acceleration(&s, &params);
        // z × x = y.
        assert!(a.y > 0.0);
        assert_relative_eq!(a.x, 0.0);
    }

    #[test]
    fn drag_free_throw_matches_closed_form() {
        let initial = State9::new([0.0; 3], [0.0, 0.0, 5.0], [0.0; 3]);
        let traj = simulate_trajectory(&initial, &drag_free(), 1.0, 1.0 / 120.0).unwrap();
        assert_eq!(traj.len(), 121);
        assert_relative_eq!(traj.goal().state.pz, 0.095, epsilon = 1e-6);
    }

    #[test]
    fn newton_rollout_matches_forceless_oracle() {
        let initial = State9::new([0.0, 0.0, 1.5], [4.0, 0.5, 3.0], [0.0; 3]);
        let oracle = simulate_trajectory(&initial, &drag_free(), 1.0, 1.0 / 120.0).unwrap();
        let rolled = newton_rollout(&initial, 120, 1.0 / 120.0).unwrap();
        let max_err = oracle
            .samples
            .iter()
            .zip(rolled.samples.iter())
            .map(|(a, b)| (a.state.position() - b.state.position()).norm())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-4, "max discrepancy {max_err}");
    }

    #[test]
    fn drag_shortens_range() {
        let initial = State9::new([0.0; 3], [5.0, 0.0, 3.0], [0.0; 3]);
        let free = simulate_trajectory(&initial, &drag_free(), 1.0, 1.0 / 120.0).unwrap();
        let dragged =
            simulate_trajectory(&initial, &ObjectParams::default(), 1.0, 1.0 / 120.0).unwrap();
        assert!(dragged.goal().state.px < free.goal().state.px);
    }

    #[test]
    fn rk4_convergence_order() {
        let params = ObjectParams {
            magnus_coefficient: 0.3,
            spin_rate: 25.0,
            ..ObjectParams::default()
        };
        let initial = State9::new([0.0, 0.0, 1.5], [5.0, 0.0, 3.0], [0.0; 3]);
        let reference = simulate_trajectory(&initial, &params, 0.5, 1e-4).unwrap();
        let p_ref = reference.goal().state.position();
        let err_at = |dt: f64| {
            let t = simulate_trajectory(&initial, &params, 0.5, dt).unwrap();
            (t.goal().state.position() - p_ref).norm()
        };
        let e1 = err_at(1.0 / 60.0);
        let e2 = err_at(1.0 / 120.0);
        let e3 = err_at(1.0 / 240.0);
        let order12 = (e1 / e2).log2();
        let order23 = (e2 / e3).log2();
        assert!(order12 > 3.8, "order {order12} (errors {e1:.3e}, {e2:.3e})");
        assert!(order23 > 3.8, "order {order23} (errors {e2:.3e}, {e3:.3e})");
    }

    #[test]
    fn energy_decreases_under_pure_drag() {
        let params = ObjectParams {
            magnus_coefficient: 0.0,
            spin_rate: 0.0,
            ..ObjectParams::default()
        };
        let initial = State9::new([0.0, 0.0, 2.0], [6.0, 0.0, 2.0], [0.0; 3]);
        let traj = simulate_trajectory(&initial, &params, 1.0, 1.0 / 120.0).unwrap();
        let energy = |s: &StateSample| {
            0.5 * s.state.velocity().norm_squared() + GRAVITY * s.state.pz
        };
        let mut prev = energy(&traj.samples[0]);
        for s in &traj.samples[1..] {
            let e = energy(s);
            assert!(e <= prev * (1.0 + 1e-6) + 1e-9, "energy rose: {prev} -> {e}");
            prev = e;
        }
    }

    #[test]
    fn dataset_generation_is_deterministic_and_in_range() {
        let throw = ThrowConfig::default();
        let params = ObjectParams::default();
        let a = generate_dataset(&throw, &params, 20, 7).unwrap();
        let b = generate_dataset(&throw, &params, 20, 7).unwrap();
        assert_eq!(a, b);
        for traj in &a {
            assert_eq!(traj.len(), 121);
            let speed = traj.samples[0].state.velocity().norm();
            assert!((5.0..=6.0).contains(&speed), "initial speed {speed}");
        }
        let c = generate_dataset(&throw, &params, 20, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_ranges_rejected() {
        let throw = ThrowConfig {
            speed_range: [6.0, 5.0],
            ..ThrowConfig::default()
        };
        assert!(generate_dataset(&throw, &ObjectParams::default(), 1, 0).is_err());
    }

    #[test]
    fn augment_identity_and_quarter_turn() {
        let initial = State9::new([0.3, 0.0, 1.5], [1.0, 0.0, 3.0], [0.0; 3]);
        let traj = simulate_trajectory(&initial, &ObjectParams::default(), 0.5, 1.0 / 120.0).unwrap();
        let same = augment(&traj, [0.0; 3], 0.0);
        assert_eq!(traj, same);
        let turned = augment(&traj, [0.0; 3], std::f64::consts::FRAC_PI_2);
        for (orig, new) in traj.samples.iter().zip(turned.samples.iter()) {
            assert_relative_eq!(new.state.vx, -orig.state.vy, epsilon = 1e-12);
            assert_relative_eq!(new.state.vy, orig.state.vx, epsilon = 1e-12);
            assert_relative_eq!(
                new.state.velocity().norm(),
                orig.state.velocity().norm(),
                epsilon = 1e-12
            );
            assert_relative_eq!(new.state.az, orig.state.az);
        }
    }

    #[test]
    fn differentiation_recovers_parabola() {
        let dt = 1.0 / 120.0;
        let positions: Vec<(f64, [f64; 3])> = (0..40)
            .map(|i| {
                let t = i as f64 * dt;
                (t, [2.0 * t, -t, 1.5 + 3.0 * t - 0.5 * GRAVITY * t * t])
            })
            .collect();
        let traj = states_from_positions(&positions, dt).unwrap();
        for s in &traj.samples {
            assert_relative_eq!(s.state.az, -GRAVITY, epsilon = 1e-6);
            assert_relative_eq!(s.state.ax, 0.0, epsilon = 1e-6);
            assert_relative_eq!(s.state.vx, 2.0, epsilon = 1e-6);
        }
        let constant: Vec<(f64, [f64; 3])> =
            (0..10).map(|i| (i as f64 * dt, [1.0, 2.0, 3.0])).collect();
        let traj = states_from_positions(&constant, dt).unwrap();
        for s in &traj.samples {
            assert_eq!(s.state.velocity().norm(), 0.0);
            assert_eq!(s.state.acceleration().norm(), 0.0);
        }
        assert!(states_from_positions(&constant[..4], dt).is_err());
    }

    #[test]
    fn differentiation_tracks_simulated_acceleration() {
        let params = ObjectParams {
            magnus_coefficient: 0.3,
            spin_rate: 25.0,
            ..ObjectParams::default()
        };
        let initial = State9::new([0.0, 0.0, 1.5], [5.5, 0.0, 2.8], [0.0; 3]);
        let traj = simulate_trajectory(&initial, &params, 1.0, 1.0 / 120.0).unwrap();
        let positions: Vec<(f64, [f64; 3])> = traj
            .samples
            .iter()
            .map(|s| (s.time, [s.state.px, s.state.py, s.state.pz]))
            .collect();
        let derived = states_from_positions(&positions, traj.dt).unwrap();
        for (d, o) in derived.samples.iter().zip(traj.samples.iter()) {
            let err = (d.state.acceleration() - o.state.acceleration()).norm();
            assert!(err < 0.05, "acceleration error {err} at t = {}", d.time);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn augment_composes_as_group_action(
            yaw1 in -3.0..3.0f64,
            yaw2 in -3.0..3.0f64,
            t1 in proptest::array::uniform3(-2.0..2.0f64),
            t2 in proptest::array::uniform3(-2.0..2.0f64),
        ) {
            let initial = State9::new([0.2, -0.4, 1.5], [4.0, 1.0, 3.0], [0.0; 3]);
            let traj = simulate_trajectory(&initial, &ObjectParams::default(), 0.2, 1.0 / 120.0).unwrap();
            let chained = augment(&augment(&traj, t1, yaw1), t2, yaw2);
            // Composition: rotate by yaw1+yaw2, translate by R(yaw2)·t1 + t2.
            let (s, c) = yaw2.sin_cos();
            let combined = [
                c * t1[0] - s * t1[1] + t2[0],
                s * t1[0] + c * t1[1] + t2[1],
                t1[2] + t2[2],
            ];
            let direct = augment(&traj, combined, yaw1 + yaw2);
            for (a, b) in chained.samples.iter().zip(direct.samples.iter()) {
                for (x, y) in a.state.to_array().iter().zip(b.state.to_array().iter()) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }
}
