//! Neural acceleration estimator: a recurrent state-sequence model that
//! consumes observed flight states and predicts the next full state, plus a
//! covariance head that scores its own acceleration estimate.
//!
//! The network is intentionally small: a two-layer tanh encoder maps each
//! 9-dimensional state into an embedding, a single LSTM layer carries flight
//! context, a two-layer decoder maps hidden states back to full states, and an
//! affine head emits per-axis log-variances for the acceleration components.
//! All forward passes run on the [`crate::autodiff::Tape`], so training and
//! inference share one implementation of the math.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::statespace::State9;
use crate::trajectory::Trajectory;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Network dimensions. The decoder hidden layer reuses `embed_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelArch {
    fn default() -> Self {
        ModelArch {
            embed_dim: 128,
            hidden_dim: 128,
        }
    }
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        // Free-running prediction feeds the hidden state back as the next
        // input, which requires matching widths.
        if self.embed_dim != self.hidden_dim {
            return Err(Error::invalid(format!(
                "embed_dim ({}) must equal hidden_dim ({}) so hidden states can be fed back as inputs",
                self.embed_dim, self.hidden_dim
            )));
        }
        Ok(())
    }
}

/// Per-dimension affine normalization applied to states before the network
/// and inverted on its outputs. Stored with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 9],
    pub std: [f64; 9],
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 9],
            std: [1.0; 9],
        }
    }

    /// Mean and standard deviation of every state dimension across all frames
    /// of the given trajectories.
    pub fn from_trajectories(trajectories: &[Trajectory]) -> Result<Self> {
        let mut count = 0usize;
        let mut mean = [0.0; 9];
        for traj in trajectories {
            for sample in &traj.samples {
                let a = sample.state.to_array();
                for (m, x) in mean.iter_mut().zip(a.iter()) {
                    *m += x;
                }
                count += 1;
            }
        }
        if count < 2 {
            return Err(Error::invalid("need at least two frames to fit normalization"));
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = [0.0; 9];
        for traj in trajectories {
            for sample in &traj.samples {
                let a = sample.state.to_array();
                for (v, (x, m)) in var.iter_mut().zip(a.iter().zip(mean.iter())) {
                    let d = x - m;
                    *v += d * d;
                }
            }
        }
        let mut std = [0.0; 9];
        for (s, v) in std.iter_mut().zip(var.iter()) {
            *s = (v / count as f64).sqrt().max(1e-8);
        }
        Ok(Normalization { mean, std })
    }

    pub fn normalize(&self, state: &State9) -> [f64; 9] {
        let a = state.to_array();
        let mut out = [0.0; 9];
        for i in 0..9 {
            out[i] = (a[i] - self.mean[i]) / self.std[i];
        }
        out
    }

    pub fn denormalize(&self, values: &[f64]) -> State9 {
        assert_eq!(values.len(), 9);
        let mut out = [0.0; 9];
        for i in 0..9 {
            out[i] = values[i] * self.std[i] + self.mean[i];
        }
        State9::from_array(out)
    }
}

/// Number of parameter tensors; fixed ordering used for flattening,
/// checkpoints, and the optimizer.
pub const N_PARAM_TENSORS: usize = 13;

/// All learnable tensors of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaeParams {
    pub enc_w1: Tensor,
    pub enc_b1: Tensor,
    pub enc_w2: Tensor,
    pub enc_b2: Tensor,
    /// Input, forget, cell, output gate weights stacked row-wise.
    pub lstm_wx: Tensor,
    pub lstm_wh: Tensor,
    pub lstm_b: Tensor,
    pub dec_w1: Tensor,
    pub dec_b1: Tensor,
    pub dec_w2: Tensor,
    pub dec_b2: Tensor,
    pub cov_w: Tensor,
    pub cov_b: Tensor,
}

impl NaeParams {
    /// Seeded uniform init in ±1/√fan_in; biases start at zero except the
    /// forget gate, which starts at one so early training retains memory.
    pub fn init(arch: &ModelArch, seed: u64) -> Self {
        let (e, h) = (arch.embed_dim, arch.hidden_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weight = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Tensor::from_vec(rows, cols, data)
        };
        let enc_w1 = weight(e, 9);
        let enc_w2 = weight(e, e);
        let lstm_wx = weight(4 * h, e);
        let lstm_wh = weight(4 * h, h);
        let dec_w1 = weight(e, h);
        let dec_w2 = weight(9, e);
        let cov_w = weight(3, h);
        let mut lstm_b = Tensor::zeros(4 * h, 1);
        for i in h..2 * h {
            lstm_b.set(i, 0, 1.0);
        }
        NaeParams {
            enc_w1,
            enc_b1: Tensor::zeros(e, 1),
            enc_w2,
            enc_b2: Tensor::zeros(e, 1),
            lstm_wx,
            lstm_wh,
            lstm_b,
            dec_w1,
            dec_b1: Tensor::zeros(e, 1),
            dec_w2,
            dec_b2: Tensor::zeros(9, 1),
            cov_w,
            cov_b: Tensor::zeros(3, 1),
        }
    }

    pub fn tensors(&self) -> [&Tensor; N_PARAM_TENSORS] {
        [
            &self.enc_w1,
            &self.enc_b1,
            &self.enc_w2,
            &self.enc_b2,
            &self.lstm_wx,
            &self.lstm_wh,
            &self.lstm_b,
            &self.dec_w1,
            &self.dec_b1,
            &self.dec_w2,
            &self.dec_b2,
            &self.cov_w,
            &self.cov_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; N_PARAM_TENSORS] {
        [
            &mut self.enc_w1,
            &mut self.enc_b1,
            &mut self.enc_w2,
            &mut self.enc_b2,
            &mut self.lstm_wx,
            &mut self.lstm_wh,
            &mut self.lstm_b,
            &mut self.dec_w1,
            &mut self.dec_b1,
            &mut self.dec_w2,
            &mut self.dec_b2,
            &mut self.cov_w,
            &mut self.cov_b,
        ]
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters concatenated in canonical tensor order, row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_scalars(), "flat parameter length mismatch");
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    fn validate_shapes(&self, arch: &ModelArch) -> Result<()> {
        let (e, h) = (arch.embed_dim, arch.hidden_dim);
        let expected = [
            (e, 9),
            (e, 1),
            (e, e),
            (e, 1),
            (4 * h, e),
            (4 * h, h),
            (4 * h, 1),
            (e, h),
            (e, 1),
            (9, e),
            (9, 1),
            (3, h),
            (3, 1),
        ];
        for (t, (r, c)) in self.tensors().iter().zip(expected.iter()) {
            if (t.rows(), t.cols()) != (*r, *c) {
                return Err(Error::invalid(format!(
                    "parameter tensor is {}x{}, architecture expects {r}x{c}",
                    t.rows(),
                    t.cols()
                )));
            }
        }
        Ok(())
    }
}

/// Observation frames the recurrent core is conditioned on during training;
/// forecasts feed it the same number of trailing frames.
pub const DEFAULT_OBSERVATION_WINDOW: usize = 12;

fn default_observation_window() -> usize {
    DEFAULT_OBSERVATION_WINDOW
}

/// The trained estimator: architecture, normalization statistics, parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaeModel {
    pub arch: ModelArch,
    pub norm: Normalization,
    pub params: NaeParams,
    /// Observed frames per window during training. The hidden state only
    /// stays in-distribution for histories of this length, so forecasts
    /// condition on the trailing `window` frames.
    #[serde(default = "default_observation_window")]
    pub window: usize,
}

impl NaeModel {
    pub fn new(arch: ModelArch, norm: Normalization, seed: u64) -> Result<Self> {
        arch.validate()?;
        Ok(NaeModel {
            arch,
            norm,
            params: NaeParams::init(&arch, seed),
            window: DEFAULT_OBSERVATION_WINDOW,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.params.validate_shapes(&self.arch)
    }

    /// Prediction of the state one frame after the given observed history.
    pub fn estimate_next(&self, history: &[State9]) -> Result<State9> {
        if history.is_empty() {
            return Err(Error::invalid("estimate_next needs at least one observed state"));
        }
        let mut session = NaeSession::new(self);
        for s in history {
            session.observe(s);
        }
        Ok(session.predicted_state())
    }

    /// Free-running forecast: consume the prefix, then roll the network
    /// forward `steps` frames on its own hidden states.
    pub fn forecast_free(&self, prefix: &[State9], steps: usize) -> Result<Vec<State9>> {
        if prefix.is_empty() {
            return Err(Error::invalid("forecast needs at least one observed state"));
        }
        let mut session = NaeSession::new(self);
        for s in prefix {
            session.observe(s);
        }
        let mut out = Vec::with_capacity(steps);
        for step in 0..steps {
            out.push(session.predicted_state());
            if step + 1 < steps {
                session.advance_free();
            }
        }
        Ok(out)
    }
}

/// Tape node handles for one materialization of the parameters.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ParamNodes {
    pub enc_w1: NodeId,
    pub enc_b1: NodeId,
    pub enc_w2: NodeId,
    pub enc_b2: NodeId,
    pub lstm_wx: NodeId,
    pub lstm_wh: NodeId,
    pub lstm_b: NodeId,
    pub dec_w1: NodeId,
    pub dec_b1: NodeId,
    pub dec_w2: NodeId,
    pub dec_b2: NodeId,
    pub cov_w: NodeId,
    pub cov_b: NodeId,
}

impl ParamNodes {
    pub(crate) fn all(&self) -> [NodeId; N_PARAM_TENSORS] {
        [
            self.enc_w1,
            self.enc_b1,
            self.enc_w2,
            self.enc_b2,
            self.lstm_wx,
            self.lstm_wh,
            self.lstm_b,
            self.dec_w1,
            self.dec_b1,
            self.dec_w2,
            self.dec_b2,
            self.cov_w,
            self.cov_b,
        ]
    }
}

pub(crate) fn push_params(tape: &mut Tape, params: &NaeParams) -> ParamNodes {
    ParamNodes {
        enc_w1: tape.leaf(params.enc_w1.clone()),
        enc_b1: tape.leaf(params.enc_b1.clone()),
        enc_w2: tape.leaf(params.enc_w2.clone()),
        enc_b2: tape.leaf(params.enc_b2.clone()),
        lstm_wx: tape.leaf(params.lstm_wx.clone()),
        lstm_wh: tape.leaf(params.lstm_wh.clone()),
        lstm_b: tape.leaf(params.lstm_b.clone()),
        dec_w1: tape.leaf(params.dec_w1.clone()),
        dec_b1: tape.leaf(params.dec_b1.clone()),
        dec_w2: tape.leaf(params.dec_w2.clone()),
        dec_b2: tape.leaf(params.dec_b2.clone()),
        cov_w: tape.leaf(params.cov_w.clone()),
        cov_b: tape.leaf(params.cov_b.clone()),
    }
}

fn affine(tape: &mut Tape, w: NodeId, x: NodeId, b: NodeId) -> NodeId {
    let wx = tape.matmul(w, x);
    tape.add(wx, b)
}

/// Two tanh layers squash every embedding into (−1, 1).
pub(crate) fn encode(tape: &mut Tape, p: &ParamNodes, x: NodeId) -> NodeId {
    let h1 = affine(tape, p.enc_w1, x, p.enc_b1);
    let h1 = tape.tanh(h1);
    let h2 = affine(tape, p.enc_w2, h1, p.enc_b2);
    tape.tanh(h2)
}

/// Tanh hidden layer, linear output back to a 9-dimensional state.
pub(crate) fn decode(tape: &mut Tape, p: &ParamNodes, h: NodeId) -> NodeId {
    let h1 = affine(tape, p.dec_w1, h, p.dec_b1);
    let h1 = tape.tanh(h1);
    affine(tape, p.dec_w2, h1, p.dec_b2)
}

/// Per-axis log-variances of the acceleration estimate.
pub(crate) fn cov_head(tape: &mut Tape, p: &ParamNodes, h: NodeId) -> NodeId {
    affine(tape, p.cov_w, h, p.cov_b)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

pub(crate) fn lstm_zero_state(tape: &mut Tape, hidden: usize) -> LstmState {
    LstmState {
        h: tape.leaf(Tensor::zeros(hidden, 1)),
        c: tape.leaf(Tensor::zeros(hidden, 1)),
    }
}

/// One LSTM step with gates stacked (input, forget, cell, output).
pub(crate) fn lstm_step(
    tape: &mut Tape,
    p: &ParamNodes,
    x: NodeId,
    prev: LstmState,
    hidden: usize,
) -> LstmState {
    let zx = tape.matmul(p.lstm_wx, x);
    let zh = tape.matmul(p.lstm_wh, prev.h);
    let z = tape.add(zx, zh);
    let z = tape.add(z, p.lstm_b);
    let i_gate = tape.rows(z, 0, hidden);
    let i_gate = tape.sigmoid(i_gate);
    let f_gate = tape.rows(z, hidden, hidden);
    let f_gate = tape.sigmoid(f_gate);
    let g_cell = tape.rows(z, 2 * hidden, hidden);
    let g_cell = tape.tanh(g_cell);
    let o_gate = tape.rows(z, 3 * hidden, hidden);
    let o_gate = tape.sigmoid(o_gate);
    let keep = tape.hadamard(f_gate, prev.c);
    let write = tape.hadamard(i_gate, g_cell);
    let c = tape.add(keep, write);
    let c_squashed = tape.tanh(c);
    let h = tape.hadamard(o_gate, c_squashed);
    LstmState { h, c }
}

/// Incremental forward pass over one tape: observe frames, read predictions,
/// or roll forward on fed-back hidden states.
pub struct NaeSession<'m> {
    model: &'m NaeModel,
    tape: Tape,
    p: ParamNodes,
    lstm: LstmState,
    observed: usize,
}

impl<'m> NaeSession<'m> {
    pub fn new(model: &'m NaeModel) -> Self {
        let mut tape = Tape::new();
        let p = push_params(&mut tape, &model.params);
        let lstm = lstm_zero_state(&mut tape, model.arch.hidden_dim);
        NaeSession {
            model,
            tape,
            p,
            lstm,
            observed: 0,
        }
    }

    /// Feeds one observed state; afterwards the session predicts the frame
    /// following it.
    pub fn observe(&mut self, state: &State9) {
        let x = self
            .tape
            .leaf(Tensor::column(&self.model.norm.normalize(state)));
        let e = encode(&mut self.tape, &self.p, x);
        self.lstm = lstm_step(&mut self.tape, &self.p, e, self.lstm, self.model.arch.hidden_dim);
        self.observed += 1;
    }

    /// Steps forward without an observation by feeding the hidden state back
    /// as the next input.
    pub fn advance_free(&mut self) {
        assert!(self.observed > 0, "cannot free-run before any observation");
        self.lstm = lstm_step(
            &mut self.tape,
            &self.p,
            self.lstm.h,
            self.lstm,
            self.model.arch.hidden_dim,
        );
    }

    /// Decoded prediction of the next frame, in original units.
    pub fn predicted_state(&mut self) -> State9 {
        assert!(self.observed > 0, "no observations yet");
        let out = decode(&mut self.tape, &self.p, self.lstm.h);
        self.model.norm.denormalize(self.tape.value(out).data())
    }

    /// Log-variances of the three acceleration components of the prediction.
    pub fn predicted_log_variances(&mut self) -> [f64; 3] {
        assert!(self.observed > 0, "no observations yet");
        let out = cov_head(&mut self.tape, &self.p, self.lstm.h);
        let d = self.tape.value(out).data();
        [d[0], d[1], d[2]]
    }

    pub fn frames_observed(&self) -> usize {
        self.observed
    }
}

/// Node handles for the three loss terms of one training window.
pub(crate) struct WindowGraph {
    pub teacher_loss: NodeId,
    pub free_loss: NodeId,
    pub reconstruction_loss: NodeId,
    pub total: NodeId,
    /// Predictions for frames 1..prefix+free−1, in order.
    #[cfg_attr(not(test), allow(dead_code))]
    pub outputs: Vec<NodeId>,
}

/// Builds the full training graph over one window of `prefix + free` frames:
/// teacher-forced passes over the prefix, free-running continuation, and
/// encoder/decoder reconstruction. Losses are mean squared error in
/// normalized space.
#[allow(clippy::too_many_arguments)]
pub(crate) fn build_window_graph(
    tape: &mut Tape,
    p: &ParamNodes,
    arch: &ModelArch,
    norm: &Normalization,
    frames: &[State9],
    prefix: usize,
    free: usize,
    weights: [f64; 3],
) -> WindowGraph {
    assert!(prefix >= 1 && free >= 1, "need prefix >= 1 and free >= 1");
    assert_eq!(frames.len(), prefix + free, "window length must be prefix + free");
    let xs: Vec<NodeId> = frames
        .iter()
        .map(|s| tape.leaf(Tensor::column(&norm.normalize(s))))
        .collect();
    let mut lstm = lstm_zero_state(tape, arch.hidden_dim);
    let mut outputs = Vec::with_capacity(prefix + free - 1);
    let mut embeddings = Vec::with_capacity(prefix);
    for x in xs.iter().take(prefix) {
        let e = encode(tape, p, *x);
        embeddings.push(e);
        lstm = lstm_step(tape, p, e, lstm, arch.hidden_dim);
        outputs.push(decode(tape, p, lstm.h));
    }
    for _ in 0..free - 1 {
        lstm = lstm_step(tape, p, lstm.h, lstm, arch.hidden_dim);
        outputs.push(decode(tape, p, lstm.h));
    }
    // outputs[t] predicts frame t+1; the first `prefix` are teacher-forced
    // (the last of those doubles as the first free-running output), the last
    // `free` run on fed-back hidden states.
    let mut teacher_terms = Vec::with_capacity(prefix);
    for t in 0..prefix {
        let diff = tape.sub(outputs[t], xs[t + 1]);
        teacher_terms.push(tape.sum_sq(diff));
    }
    let teacher_loss = mean_of(tape, &teacher_terms, prefix * 9);
    let mut free_terms = Vec::with_capacity(free);
    for j in 0..free {
        let out = outputs[prefix - 1 + j];
        let diff = tape.sub(out, xs[prefix + j]);
        free_terms.push(tape.sum_sq(diff));
    }
    let free_loss = mean_of(tape, &free_terms, free * 9);
    let mut recon_terms = Vec::with_capacity(prefix);
    for (t, e) in embeddings.iter().enumerate() {
        let rec = decode(tape, p, *e);
        let diff = tape.sub(rec, xs[t]);
        recon_terms.push(tape.sum_sq(diff));
    }
    let reconstruction_loss = mean_of(tape, &recon_terms, prefix * 9);
    let w1 = tape.scale(teacher_loss, weights[0]);
    let w2 = tape.scale(free_loss, weights[1]);
    let w3 = tape.scale(reconstruction_loss, weights[2]);
    let partial = tape.add(w1, w2);
    let total = tape.add(partial, w3);
    WindowGraph {
        teacher_loss,
        free_loss,
        reconstruction_loss,
        total,
        outputs,
    }
}

fn mean_of(tape: &mut Tape, terms: &[NodeId], denom: usize) -> NodeId {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = tape.add(acc, *t);
    }
    tape.scale(acc, 1.0 / denom as f64)
}

/// The three loss terms of one window, by name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisedLosses {
    pub teacher: f64,
    pub free_running: f64,
    pub reconstruction: f64,
    pub total: f64,
}

/// Evaluates the supervised window losses without training.
pub fn supervised_losses(
    model: &NaeModel,
    frames: &[State9],
    prefix: usize,
    free: usize,
    weights: [f64; 3],
) -> Result<SupervisedLosses> {
    if prefix < 1 || free < 1 || frames.len() != prefix + free {
        return Err(Error::invalid(
            "window must hold exactly prefix + free frames with prefix, free >= 1",
        ));
    }
    let mut tape = Tape::new();
    let p = push_params(&mut tape, &model.params);
    let g = build_window_graph(&mut tape, &p, &model.arch, &model.norm, frames, prefix, free, weights);
    Ok(SupervisedLosses {
        teacher: tape.scalar(g.teacher_loss),
        free_running: tape.scalar(g.free_loss),
        reconstruction: tape.scalar(g.reconstruction_loss),
        total: tape.scalar(g.total),
    })
}

/// Total supervised loss and its gradient with respect to every parameter,
/// flattened in canonical order. Used by training and by gradient checks.
pub fn supervised_loss_and_gradient(
    model: &NaeModel,
    frames: &[State9],
    prefix: usize,
    free: usize,
    weights: [f64; 3],
) -> Result<(f64, Vec<f64>)> {
    if prefix < 1 || free < 1 || frames.len() != prefix + free {
        return Err(Error::invalid(
            "window must hold exactly prefix + free frames with prefix, free >= 1",
        ));
    }
    let mut tape = Tape::new();
    let p = push_params(&mut tape, &model.params);
    let g = build_window_graph(&mut tape, &p, &model.arch, &model.norm, frames, prefix, free, weights);
    let loss = tape.scalar(g.total);
    tape.backward(g.total);
    let mut flat = Vec::with_capacity(model.params.n_scalars());
    for id in p.all() {
        flat.extend_from_slice(tape.grad(id).data());
    }
    Ok((loss, flat))
}

/// Training hyperparameters shared by the supervised and filter stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied after every epoch;
    /// 1.0 keeps the rate constant.
    pub lr_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub seed: u64,
    /// Frames fed with observations in each training window.
    pub prefix_len: usize,
    /// Frames continued on fed-back hidden states in each window.
    pub free_run_len: usize,
    /// Weights of the teacher-forced, free-running, and reconstruction terms.
    pub loss_weights: [f64; 3],
    /// Windows sampled from each trajectory per epoch.
    pub windows_per_trajectory: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            clip_norm: 5.0,
            seed: 0,
            prefix_len: DEFAULT_OBSERVATION_WINDOW,
            free_run_len: 8,
            loss_weights: [1.0, 1.0, 1.0],
            windows_per_trajectory: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("lr_decay must lie in (0, 1]"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip norm must be positive"));
        }
        if self.prefix_len < 1 || self.free_run_len < 1 {
            return Err(Error::invalid("prefix_len and free_run_len must be >= 1"));
        }
        if self.windows_per_trajectory < 1 {
            return Err(Error::invalid("windows_per_trajectory must be >= 1"));
        }
        if self.loss_weights.iter().any(|w| *w < 0.0) {
            return Err(Error::invalid("loss weights must be >= 0"));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.prefix_len + self.free_run_len
    }
}

/// Adam optimizer over the canonical parameter tensor list.
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub(crate) fn new(params: &NaeParams, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub(crate) fn apply(&mut self, params: &mut NaeParams, grads: &[Tensor]) {
        assert_eq!(grads.len(), N_PARAM_TENSORS);
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((t, g), (m, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let td = t.data_mut();
            #[allow(clippy::needless_range_loop)] // k indexes three slices in lockstep
            for k in 0..td.len() {
                let gk = g.data()[k];
                m.data_mut()[k] = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                v.data_mut()[k] = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m.data()[k] / bc1;
                let vhat = v.data()[k] / bc2;
                td[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales all gradients so their global norm is at most `max_norm`; returns
/// the pre-clip norm.
pub(crate) fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// Per-epoch mean training losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub windows_per_epoch: usize,
}

fn validate_training_inputs(trajectories: &[Trajectory], window: usize) -> Result<()> {
    if trajectories.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for t in trajectories {
        if t.len() < window {
            return Err(Error::invalid(format!(
                "trajectory {} has {} frames, shorter than the {window}-frame training window",
                t.object_id,
                t.len()
            )));
        }
    }
    Ok(())
}

/// Trains a fresh estimator on the supervised window losses with Adam and
/// global gradient clipping. Fully deterministic in the config seed.
pub fn train_nae(
    trajectories: &[Trajectory],
    arch: ModelArch,
    cfg: &TrainConfig,
) -> Result<(NaeModel, TrainReport)> {
    cfg.validate()?;
    let window = cfg.window_len();
    validate_training_inputs(trajectories, window)?;
    let norm = Normalization::from_trajectories(trajectories)?;
    let mut model = NaeModel::new(arch, norm, cfg.seed)?;
    model.window = cfg.prefix_len;
    let report = train_windows(&mut model, trajectories, cfg, |tape, p, model, frames| {
        // Windows sampled near the end of a flight carry fewer free-running
        // frames; the split is always prefix_len observed plus the rest free.
        Ok(build_window_graph(
            tape,
            p,
            &model.arch,
            &model.norm,
            frames,
            cfg.prefix_len,
            frames.len() - cfg.prefix_len,
            cfg.loss_weights,
        )
        .total)
    })?;
    Ok((model, report))
}

/// Shared training loop: samples windows deterministically and optimizes the
/// scalar loss node returned by `build_loss`.
pub(crate) fn train_windows(
    model: &mut NaeModel,
    trajectories: &[Trajectory],
    cfg: &TrainConfig,
    build_loss: impl Fn(&mut Tape, &ParamNodes, &NaeModel, &[State9]) -> Result<NodeId>,
) -> Result<TrainReport> {
    let window = cfg.window_len();
    validate_training_inputs(trajectories, window)?;
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let windows_per_epoch = trajectories.len() * cfg.windows_per_trajectory;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32);
        let mut epoch_loss = 0.0;
        for traj in trajectories {
            for _ in 0..cfg.windows_per_trajectory {
                // Starts cover the whole flight so the recurrent core also
                // sees landing-phase observations; windows that would run past
                // the end are truncated (keeping at least one target frame).
                let max_start = traj.len() - cfg.prefix_len - 1;
                let start = if max_start == 0 {
                    0
                } else {
                    rng.gen_range(0..=max_start)
                };
                let len = window.min(traj.len() - start);
                let frames: Vec<State9> =
                    traj.samples[start..start + len].iter().map(|s| s.state).collect();
                let mut tape = Tape::new();
                let p = push_params(&mut tape, &model.params);
                let total = build_loss(&mut tape, &p, model, &frames)?;
                let loss = tape.scalar(total);
                step += 1;
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged { step, loss });
                }
                epoch_loss += loss;
                tape.backward(total);
                let mut grads: Vec<Tensor> =
                    p.all().iter().map(|id| tape.grad(*id).clone()).collect();
                clip_gradients(&mut grads, cfg.clip_norm);
                adam.apply(&mut model.params, &grads);
            }
        }
        epoch_losses.push(epoch_loss / windows_per_epoch as f64);
    }
    Ok(TrainReport {
        epoch_losses,
        windows_per_epoch,
    })
}

/// Serialized training artifact: model plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// "nae" for the supervised estimator, "naedf" after filter fine-tuning.
    pub kind: String,
    pub model: NaeModel,
    pub seed: u64,
    pub epochs_trained: usize,
    pub final_loss: f64,
    /// Hash of the run configuration that produced this artifact, if any.
    pub config_hash: Option<String>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, checkpoint)?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let checkpoint: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
    if checkpoint.format_version != CHECKPOINT_VERSION {
        return Err(Error::invalid(format!(
            "checkpoint format version {} is not supported (expected {CHECKPOINT_VERSION})",
            checkpoint.format_version
        )));
    }
    if checkpoint.kind != "nae" && checkpoint.kind != "naedf" {
        return Err(Error::invalid(format!(
            "unknown checkpoint kind '{}'",
            checkpoint.kind
        )));
    }
    checkpoint.model.validate()?;
    Ok(checkpoint)
}
