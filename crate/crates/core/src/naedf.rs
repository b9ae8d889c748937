//! Differentiable-filter variant of the acceleration estimator.
//!
//! The network's next-state estimate is turned into a pseudo-measurement of
//! acceleration whose covariance comes from the covariance head; a
//! constant-acceleration Kalman filter fuses those measurements. During
//! fine-tuning the whole filter recursion runs on the autodiff tape so the
//! likelihood loss trains the network through the filter. Inference uses the
//! plain filter from [`crate::statespace`]; a test pins the two paths to each
//! other.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nae::{
    cov_head, decode, encode, lstm_step, lstm_zero_state, push_params, train_windows, NaeModel,
    NaeSession, ParamNodes, TrainConfig, TrainReport,
};
use crate::statespace::{
    initial_belief, make_transition_matrix, observation_matrix, predict_step, update_step,
    AccelMeasurement, FilterBelief, Mat9, ProcessNoise, State9,
};
use crate::trajectory::{StateSample, Trajectory};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// How the covariance-volume penalty enters the likelihood loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetMode {
    /// Penalize the determinant of the innovation covariance directly.
    Det,
    /// Penalize its logarithm instead.
    LogDet,
}

/// Filter and loss configuration for the differentiable-filter stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NaedfConfig {
    pub process_noise: ProcessNoise,
    /// Floor added to every measurement-variance diagonal entry.
    pub measurement_floor: f64,
    /// Weight of the covariance-volume penalty in the likelihood loss.
    pub det_weight: f64,
    pub det_mode: DetMode,
}

impl Default for NaedfConfig {
    fn default() -> Self {
        NaedfConfig {
            process_noise: ProcessNoise::default(),
            measurement_floor: 1e-4,
            det_weight: 1e-2,
            det_mode: DetMode::Det,
        }
    }
}

impl NaedfConfig {
    pub fn validate(&self) -> Result<()> {
        ProcessNoise::new(self.process_noise.diag)?;
        if !(self.measurement_floor > 0.0) {
            return Err(Error::invalid("measurement floor must be positive"));
        }
        if self.det_weight < 0.0 {
            return Err(Error::invalid("determinant weight must be >= 0"));
        }
        Ok(())
    }
}

/// Produces one acceleration pseudo-measurement per filtered frame, in order.
pub trait MeasurementSource {
    /// `latest` is the most recently available frame (observed during the
    /// prefix, the filter's own posterior mean beyond it); the returned
    /// measurement targets the following frame.
    fn next_measurement(&mut self, latest: &State9) -> Result<AccelMeasurement>;
}

/// Ground-truth accelerations with a fixed isotropic variance. Substituting
/// this source for the network isolates the filter from estimation error.
pub struct OracleMeasurementSource<'a> {
    trajectory: &'a Trajectory,
    variance: f64,
    cursor: usize,
}

impl<'a> OracleMeasurementSource<'a> {
    pub fn new(trajectory: &'a Trajectory, variance: f64) -> Self {
        OracleMeasurementSource {
            trajectory,
            variance,
            cursor: 1,
        }
    }
}

impl MeasurementSource for OracleMeasurementSource<'_> {
    fn next_measurement(&mut self, _latest: &State9) -> Result<AccelMeasurement> {
        let sample = self.trajectory.samples.get(self.cursor).ok_or_else(|| {
            Error::invalid("oracle measurement requested past the end of the trajectory")
        })?;
        self.cursor += 1;
        AccelMeasurement::new(
            sample.state.acceleration(),
            Matrix3::identity() * self.variance,
        )
    }
}

/// The network as a measurement source: the acceleration components of its
/// next-state estimate, with covariance from the covariance head.
pub struct NetworkMeasurementSource<'m> {
    session: NaeSession<'m>,
    measurement_floor: f64,
}

impl<'m> NetworkMeasurementSource<'m> {
    pub fn new(model: &'m NaeModel, config: &NaedfConfig) -> Self {
        NetworkMeasurementSource {
            session: NaeSession::new(model),
            measurement_floor: config.measurement_floor,
        }
    }
}

impl MeasurementSource for NetworkMeasurementSource<'_> {
    fn next_measurement(&mut self, latest: &State9) -> Result<AccelMeasurement> {
        self.session.observe(latest);
        let estimate = self.session.predicted_state();
        let logvars = self.session.predicted_log_variances();
        let mut r = Matrix3::zeros();
        for i in 0..3 {
            r[(i, i)] = logvars[i].exp() + self.measurement_floor;
        }
        AccelMeasurement::new(estimate.acceleration(), r)
    }
}

/// Runs the constant-acceleration filter over uniformly spaced frames,
/// seeding the belief from the first frame and fusing one pseudo-measurement
/// per subsequent frame. Returns one belief per frame.
pub fn filter_window<S: MeasurementSource>(
    frames: &[StateSample],
    dt: f64,
    source: &mut S,
    process_noise: &ProcessNoise,
) -> Result<Vec<FilterBelief>> {
    if frames.len() < 2 {
        return Err(Error::invalid("filtering needs at least two frames"));
    }
    let a = make_transition_matrix(dt)?;
    let mut beliefs = Vec::with_capacity(frames.len());
    beliefs.push(initial_belief(frames[0].state, frames[0].time));
    for t in 1..frames.len() {
        let measurement = source.next_measurement(&frames[t - 1].state)?;
        let prior = predict_step(beliefs.last().unwrap(), &a, process_noise);
        let (posterior, _gain) = update_step(&prior, &measurement)?;
        beliefs.push(posterior);
    }
    Ok(beliefs)
}

/// Forecast by rolling the filter beyond the observed prefix: the network
/// keeps estimating accelerations, but from the filter's own posterior means
/// instead of observations. Returns `steps` samples continuing the prefix.
pub fn forecast(
    model: &NaeModel,
    config: &NaedfConfig,
    prefix: &[StateSample],
    dt: f64,
    steps: usize,
) -> Result<Vec<StateSample>> {
    config.validate()?;
    if prefix.len() < 2 {
        return Err(Error::invalid("forecast needs at least two observed frames"));
    }
    let a = make_transition_matrix(dt)?;
    let mut source = NetworkMeasurementSource::new(model, config);
    let mut belief = initial_belief(prefix[0].state, prefix[0].time);
    for t in 1..prefix.len() {
        let measurement = source.next_measurement(&prefix[t - 1].state)?;
        let prior = predict_step(&belief, &a, &config.process_noise);
        belief = update_step(&prior, &measurement)?.0;
    }
    let mut latest = prefix.last().unwrap().state;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let measurement = source.next_measurement(&latest)?;
        let prior = predict_step(&belief, &a, &config.process_noise);
        belief = update_step(&prior, &measurement)?.0;
        latest = belief.mean;
        out.push(StateSample {
            time: belief.time,
            state: latest,
        });
    }
    Ok(out)
}

fn tensor_from_mat9(m: &Mat9) -> Tensor {
    Tensor::from_fn(9, 9, |i, j| m[(i, j)])
}

/// Per-window filter graph on the tape: loss plus per-frame posteriors.
pub(crate) struct FilterGraph {
    pub loss: NodeId,
    // Exposed for the plain-filter equivalence tests.
    #[cfg_attr(not(test), allow(dead_code))]
    pub posterior_means: Vec<NodeId>,
    #[cfg_attr(not(test), allow(dead_code))]
    pub posterior_covs: Vec<NodeId>,
}

/// Builds the differentiable filter pass over one window of observed frames.
///
/// For each frame after the first: the network (having consumed all earlier
/// frames) emits an acceleration estimate and log-variances; the filter
/// predicts and fuses that measurement; the loss accumulates the Mahalanobis
/// residual of the estimate against the frame's true acceleration under the
/// innovation covariance, plus the weighted covariance-volume penalty.
pub(crate) fn build_filter_graph(
    tape: &mut Tape,
    p: &ParamNodes,
    model: &NaeModel,
    config: &NaedfConfig,
    frames: &[State9],
    dt: f64,
) -> Result<FilterGraph> {
    if frames.len() < 2 {
        return Err(Error::invalid("filter window needs at least two frames"));
    }
    let hidden = model.arch.hidden_dim;
    let a = make_transition_matrix(dt)?;
    let a_node = tape.leaf(tensor_from_mat9(&a));
    let a_t_node = tape.leaf(tensor_from_mat9(&a.transpose()));
    let c = observation_matrix();
    let c_node = tape.leaf(Tensor::from_fn(3, 9, |i, j| c[(i, j)]));
    let c_t_node = tape.leaf(Tensor::from_fn(9, 3, |i, j| c[(j, i)]));
    let q_node = tape.leaf(Tensor::from_fn(9, 9, |i, j| {
        if i == j {
            config.process_noise.diag[i]
        } else {
            0.0
        }
    }));
    let identity9 = tape.leaf(Tensor::identity(9));
    let floor_node = tape.leaf(Tensor::scaled_identity(3, config.measurement_floor));
    let std_acc = tape.leaf(Tensor::column(&model.norm.std[6..9]));
    let mean_acc = tape.leaf(Tensor::column(&model.norm.mean[6..9]));

    let seed_belief = initial_belief(frames[0], 0.0);
    let mut mean = tape.leaf(Tensor::from_fn(9, 1, |i, _| seed_belief.mean.to_array()[i]));
    let mut cov = tape.leaf(tensor_from_mat9(seed_belief.cov.matrix()));
    let mut lstm = lstm_zero_state(tape, hidden);
    let mut loss_terms = Vec::with_capacity(frames.len() - 1);
    let mut posterior_means = vec![mean];
    let mut posterior_covs = vec![cov];
    for t in 1..frames.len() {
        // Network estimate from frames 0..t−1.
        let x = tape.leaf(Tensor::column(&model.norm.normalize(&frames[t - 1])));
        let e = encode(tape, p, x);
        lstm = lstm_step(tape, p, e, lstm, hidden);
        let estimate_norm = decode(tape, p, lstm.h);
        let acc_norm = tape.rows(estimate_norm, 6, 3);
        let scaled = tape.hadamard(acc_norm, std_acc);
        let z = tape.add(scaled, mean_acc);
        let logvars = cov_head(tape, p, lstm.h);
        let variances = tape.exp(logvars);
        let var_diag = tape.diag_from_vec(variances);
        let r = tape.add(var_diag, floor_node);

        // Predict.
        let mean_prior = tape.matmul(a_node, mean);
        let a_cov = tape.matmul(a_node, cov);
        let a_cov_at = tape.matmul(a_cov, a_t_node);
        let cov_prior = tape.add(a_cov_at, q_node);

        // Fuse.
        let c_cov = tape.matmul(c_node, cov_prior);
        let c_cov_ct = tape.matmul(c_cov, c_t_node);
        let s = tape.add(c_cov_ct, r);
        let s_inv = tape.inverse(s)?;
        let cov_ct = tape.matmul(cov_prior, c_t_node);
        let gain = tape.matmul(cov_ct, s_inv);
        let c_mean = tape.matmul(c_node, mean_prior);
        let innovation = tape.sub(z, c_mean);
        let correction = tape.matmul(gain, innovation);
        mean = tape.add(mean_prior, correction);
        let gain_c = tape.matmul(gain, c_node);
        let closed = tape.sub(identity9, gain_c);
        let updated = tape.matmul(closed, cov_prior);
        let updated_t = tape.transpose(updated);
        let summed = tape.add(updated, updated_t);
        cov = tape.scale(summed, 0.5);
        posterior_means.push(mean);
        posterior_covs.push(cov);

        // Likelihood of the estimate against the frame's true acceleration.
        let true_acc = tape.leaf(Tensor::from_fn(3, 1, |i, _| frames[t].to_array()[6 + i]));
        let residual = tape.sub(z, true_acc);
        let residual_t = tape.transpose(residual);
        let weighted = tape.matmul(residual_t, s_inv);
        let mahalanobis = tape.matmul(weighted, residual);
        let volume = tape.det(s);
        let volume = match config.det_mode {
            DetMode::Det => volume,
            DetMode::LogDet => tape.ln(volume),
        };
        let penalty = tape.scale(volume, config.det_weight);
        loss_terms.push(tape.add(mahalanobis, penalty));
    }
    let mut acc = loss_terms[0];
    for term in &loss_terms[1..] {
        acc = tape.add(acc, *term);
    }
    let loss = tape.scale(acc, 1.0 / loss_terms.len() as f64);
    Ok(FilterGraph {
        loss,
        posterior_means,
        posterior_covs,
    })
}

/// Likelihood loss of one observed window under the differentiable filter.
pub fn filter_loss(
    model: &NaeModel,
    config: &NaedfConfig,
    frames: &[State9],
    dt: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = push_params(&mut tape, &model.params);
    let graph = build_filter_graph(&mut tape, &p, model, config, frames, dt)?;
    Ok(tape.scalar(graph.loss))
}

/// Likelihood loss and its gradient with respect to every parameter,
/// flattened in canonical order; the gradient flows through the full filter
/// recursion.
pub fn filter_loss_and_gradient(
    model: &NaeModel,
    config: &NaedfConfig,
    frames: &[State9],
    dt: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = push_params(&mut tape, &model.params);
    let graph = build_filter_graph(&mut tape, &p, model, config, frames, dt)?;
    let loss = tape.scalar(graph.loss);
    tape.backward(graph.loss);
    let mut flat = Vec::with_capacity(model.params.n_scalars());
    for id in p.all() {
        flat.extend_from_slice(tape.grad(id).data());
    }
    Ok((loss, flat))
}

/// Fine-tunes a supervised estimator through the filter on the likelihood
/// loss. Windows are sampled exactly as in the supervised stage (window
/// length `prefix_len + free_run_len`), but every frame is observed.
pub fn train_naedf(
    trajectories: &[Trajectory],
    warm_start: &NaeModel,
    cfg: &TrainConfig,
    config: &NaedfConfig,
) -> Result<(NaeModel, TrainReport)> {
    cfg.validate()?;
    config.validate()?;
    warm_start.validate()?;
    if trajectories.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let dt = trajectories[0].dt;
    for t in trajectories {
        if (t.dt - dt).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "trajectory {} has dt {}, training set uses {dt}",
                t.object_id, t.dt
            )));
        }
    }
    let mut model = warm_start.clone();
    let report = train_windows(&mut model, trajectories, cfg, |tape, p, model, frames| {
        Ok(build_filter_graph(tape, p, model, config, frames, dt)?.loss)
    })?;
    Ok((model, report))
}

/// Mean innovation-covariance determinant over a window, filtered with the
/// network as the measurement source. Used to cross-check the loss.
pub fn mean_innovation_determinant(
    model: &NaeModel,
    config: &NaedfConfig,
    frames: &[StateSample],
    dt: f64,
) -> Result<f64> {
    let a = make_transition_matrix(dt)?;
    let c = observation_matrix();
    let mut source = NetworkMeasurementSource::new(model, config);
    let mut belief = initial_belief(frames[0].state, frames[0].time);
    let mut acc = 0.0;
    for t in 1..frames.len() {
        let measurement = source.next_measurement(&frames[t - 1].state)?;
        let prior = predict_step(&belief, &a, &config.process_noise);
        let s: Matrix3<f64> =
            c * prior.cov.matrix() * c.transpose() + measurement.r;
        acc += s.determinant();
        belief = update_step(&prior, &measurement)?.0;
    }
    Ok(acc / (frames.len() - 1) as f64)
}

/// Isotropic-variance wrapper used when feeding ground truth into the filter.
pub fn oracle_accel_measurement(state: &State9, variance: f64) -> Result<AccelMeasurement> {
    AccelMeasurement::new(
        Vector3::new(state.ax, state.ay, state.az),
        Matrix3::identity() * variance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::flight::{generate_dataset, simulate_trajectory, ObjectParams, ThrowConfig};
    use crate::nae::{train_nae, ModelArch, Normalization};
    use crate::statespace::Covariance9;
    use approx::assert_relative_eq;

    fn tiny_arch() -> ModelArch {
        ModelArch {
            embed_dim: 8,
            hidden_dim: 8,
        }
    }

    fn spinning_params() -> ObjectParams {
        ObjectParams {
            magnus_coefficient: 0.3,
            spin_rate: 25.0,
            ..ObjectParams::default()
        }
    }

    fn small_model() -> NaeModel {
        let trajs = generate_dataset(&ThrowConfig::default(), &spinning_params(), 4, 31).unwrap();
        let norm = Normalization::from_trajectories(&trajs).unwrap();
        NaeModel::new(tiny_arch(), norm, 5).unwrap()
    }

    #[test]
    fn zeroed_covariance_head_gives_unit_variances_plus_floor() {
        let mut model = small_model();
        model.params.cov_w = Tensor::zeros(3, 8);
        model.params.cov_b = Tensor::zeros(3, 1);
        let config = NaedfConfig::default();
        let mut source = NetworkMeasurementSource::new(&model, &config);
        let m = source
            .next_measurement(&State9::new([0.0, 0.0, 1.5], [5.0, 0.0, 3.0], [0.0, 0.0, -9.81]))
            .unwrap();
        for i in 0..3 {
            assert_relative_eq!(m.r[(i, i)], 1.0 + 1e-4, epsilon = 1e-12);
            for j in 0..3 {
                if i != j {
                    assert_eq!(m.r[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn filtering_keeps_covariance_valid() {
        let model = small_model();
        let config = NaedfConfig::default();
        let traj = simulate_trajectory(
            &State9::new([0.0, 0.0, 1.5], [5.0, 0.3, 3.0], [0.0; 3]),
            &spinning_params(),
            0.5,
            1.0 / 120.0,
        )
        .unwrap();
        let mut source = NetworkMeasurementSource::new(&model, &config);
        let beliefs =
            filter_window(&traj.samples, traj.dt, &mut source, &config.process_noise).unwrap();
        assert_eq!(beliefs.len(), traj.len());
        for b in &beliefs {
            Covariance9::new(*b.cov.matrix()).unwrap();
            assert!(b.mean.is_finite());
        }
    }

    #[test]
    fn oracle_measurements_with_tiny_variance_recover_the_truth() {
        // With only acceleration pinned, position and velocity are dead
        // reckoning under the constant-acceleration transition; the residual
        // error is the within-step acceleration variation, which grows with
        // jerk and flight time. A 0.75 s drag+Magnus throw stays well under
        // a millimeter.
        let traj = simulate_trajectory(
            &State9::new([0.0, 0.0, 1.5], [5.0, 0.5, 3.2], [0.0; 3]),
            &spinning_params(),
            0.75,
            1.0 / 120.0,
        )
        .unwrap();
        let mut source = OracleMeasurementSource::new(&traj, 1e-12);
        let beliefs =
            filter_window(&traj.samples, traj.dt, &mut source, &ProcessNoise::default()).unwrap();
        let last = beliefs.last().unwrap();
        let truth = traj.goal().state;
        let pos_err = (last.mean.position() - truth.position()).norm();
        assert!(pos_err < 1e-3, "position error {pos_err}");

        // Constant gravity matches the transition model exactly, so recovery
        // is limited only by arithmetic.
        let free = simulate_trajectory(
            &State9::new([0.0, 0.0, 1.5], [5.0, 0.5, 3.2], [0.0; 3]),
            &ObjectParams {
                drag_coefficient: 0.0,
                ..ObjectParams::default()
            },
            1.0,
            1.0 / 120.0,
        )
        .unwrap();
        let mut source = OracleMeasurementSource::new(&free, 1e-12);
        let beliefs =
            filter_window(&free.samples, free.dt, &mut source, &ProcessNoise::default()).unwrap();
        let pos_err = (beliefs.last().unwrap().mean.position() - free.goal().state.position()).norm();
        assert!(pos_err < 1e-6, "drag-free position error {pos_err}");
    }

    #[test]
    fn huge_measurement_variance_disables_the_update() {
        let mut model = small_model();
        // exp(60) dwarfs any covariance the filter can accumulate.
        model.params.cov_b = Tensor::from_vec(3, 1, vec![60.0; 3]);
        let config = NaedfConfig::default();
        let traj = simulate_trajectory(
            &State9::new([0.0, 0.0, 1.5], [5.0, 0.0, 3.0], [0.0; 3]),
            &spinning_params(),
            0.2,
            1.0 / 120.0,
        )
        .unwrap();
        let a = make_transition_matrix(traj.dt).unwrap();
        let mut source = NetworkMeasurementSource::new(&model, &config);
        let mut belief = initial_belief(traj.samples[0].state, 0.0);
        for t in 1..traj.len() {
            let m = source.next_measurement(&traj.samples[t - 1].state).unwrap();
            let prior = predict_step(&belief, &a, &config.process_noise);
            let posterior = update_step(&prior, &m).unwrap().0;
            let shift = (posterior.mean.to_vector() - prior.mean.to_vector()).norm();
            assert!(shift < 1e-9, "update moved the mean by {shift}");
            belief = posterior;
        }
    }

    #[test]
    fn tape_filter_matches_plain_filter() {
        let model = small_model();
        let config = NaedfConfig::default();
        let traj = simulate_trajectory(
            &State9::new([0.1, -0.2, 1.5], [4.8, 0.4, 3.1], [0.0; 3]),
            &spinning_params(),
            0.2,
            1.0 / 120.0,
        )
        .unwrap();
        let frames: Vec<State9> = traj.samples.iter().map(|s| s.state).collect();

        let mut tape = Tape::new();
        let p = push_params(&mut tape, &model.params);
        let graph = build_filter_graph(&mut tape, &p, &model, &config, &frames, traj.dt).unwrap();

        let mut source = NetworkMeasurementSource::new(&model, &config);
        let beliefs =
            filter_window(&traj.samples, traj.dt, &mut source, &config.process_noise).unwrap();

        assert_eq!(graph.posterior_means.len(), beliefs.len());
        for (t, belief) in beliefs.iter().enumerate() {
            let mean = tape.value(graph.posterior_means[t]);
            let cov = tape.value(graph.posterior_covs[t]);
            for i in 0..9 {
                assert_relative_eq!(mean.get(i, 0), belief.mean.to_array()[i], epsilon = 1e-12);
                for j in 0..9 {
                    assert_relative_eq!(
                        cov.get(i, j),
                        belief.cov.matrix()[(i, j)],
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn loss_is_affine_in_the_determinant_weight() {
        let model = small_model();
        let traj = simulate_trajectory(
            &State9::new([0.0, 0.0, 1.5], [5.0, 0.2, 3.0], [0.0; 3]),
            &spinning_params(),
            0.1,
            1.0 / 120.0,
        )
        .unwrap();
        let frames: Vec<State9> = traj.samples.iter().map(|s| s.state).collect();
        let loss_at = |w: f64| {
            let config = NaedfConfig {
                det_weight: w,
                ..NaedfConfig::default()
            };
            filter_loss(&model, &config, &frames, traj.dt).unwrap()
        };
        let (l0, l1, l2) = (loss_at(0.0), loss_at(0.01), loss_at(0.02));
        assert_relative_eq!(l2 - l1, l1 - l0, epsilon = 1e-12);
        // The slope is exactly the mean innovation determinant.
        let mean_det =
            mean_innovation_determinant(&model, &NaedfConfig::default(), &traj.samples, traj.dt)
                .unwrap();
        assert_relative_eq!((l1 - l0) / 0.01, mean_det, epsilon = 1e-9);
    }

    #[test]
    fn log_determinant_mode_changes_the_penalty() {
        let model = small_model();
        let traj = simulate_trajectory(
            &State9::new([0.0, 0.0, 1.5], [5.0, 0.2, 3.0], [0.0; 3]),
            &spinning_params(),
            0.1,
            1.0 / 120.0,
        )
        .unwrap();
        let frames: Vec<State9> = traj.samples.iter().map(|s| s.state).collect();
        let det_loss = filter_loss(&model, &NaedfConfig::default(), &frames, traj.dt).unwrap();
        let log_cfg = NaedfConfig {
            det_mode: DetMode::LogDet,
            ..NaedfConfig::default()
        };
        let log_loss = filter_loss(&model, &log_cfg, &frames, traj.dt).unwrap();
        assert!((det_loss - log_loss).abs() > 1e-9);
        let zero_cfg = NaedfConfig {
            det_weight: 0.0,
            det_mode: DetMode::LogDet,
            ..NaedfConfig::default()
        };
        let zero_det_cfg = NaedfConfig {
            det_weight: 0.0,
            ..NaedfConfig::default()
        };
        assert_relative_eq!(
            filter_loss(&model, &zero_cfg, &frames, traj.dt).unwrap(),
            filter_loss(&model, &zero_det_cfg, &frames, traj.dt).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn filter_gradient_matches_finite_differences() {
        let model = small_model();
        let config = NaedfConfig::default();
        let traj = simulate_trajectory(
            &State9::new([0.0, 0.0, 1.5], [5.0, 0.1, 3.0], [0.0; 3]),
            &spinning_params(),
            0.05,
            1.0 / 120.0,
        )
        .unwrap();
        let frames: Vec<State9> = traj.samples[..3].iter().map(|s| s.state).collect();
        let (_, analytic) = filter_loss_and_gradient(&model, &config, &frames, traj.dt).unwrap();
        let flat = model.params.flatten();
        let result = gradcheck(
            |p| {
                let mut m = model.clone();
                m.params.set_from_flat(p);
                filter_loss(&m, &config, &frames, traj.dt).unwrap()
            },
            &flat,
            &analytic,
        );
        assert!(result.passed(), "{result:?}");
    }

    #[test]
    fn fine_tuning_is_deterministic_and_zero_epochs_is_identity() {
        let trajs = generate_dataset(&ThrowConfig::default(), &spinning_params(), 4, 77).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            prefix_len: 10,
            free_run_len: 4,
            seed: 8,
            ..TrainConfig::default()
        };
        let (warm, _) = train_nae(&trajs, tiny_arch(), &cfg).unwrap();
        let config = NaedfConfig::default();
        let (a, ra) = train_naedf(&trajs, &warm, &cfg, &config).unwrap();
        let (b, rb) = train_naedf(&trajs, &warm, &cfg, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let zero = TrainConfig { epochs: 0, ..cfg };
        let (untouched, report) = train_naedf(&trajs, &warm, &zero, &config).unwrap();
        assert_eq!(untouched, warm);
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn forecast_continues_the_prefix_timeline() {
        let model = small_model();
        let config = NaedfConfig::default();
        let traj = simulate_trajectory(
            &State9::new([0.0, 0.0, 1.5], [5.0, 0.2, 3.0], [0.0; 3]),
            &spinning_params(),
            0.5,
            1.0 / 120.0,
        )
        .unwrap();
        let prefix = &traj.samples[..10];
        let out = forecast(&model, &config, prefix, traj.dt, 5).unwrap();
        assert_eq!(out.len(), 5);
        for (i, s) in out.iter().enumerate() {
            let expected = prefix.last().unwrap().time + (i + 1) as f64 * traj.dt;
            assert_relative_eq!(s.time, expected, epsilon = 1e-9);
            assert!(s.state.is_finite());
        }
        assert!(forecast(&model, &config, &traj.samples[..1], traj.dt, 3).is_err());
    }
}
