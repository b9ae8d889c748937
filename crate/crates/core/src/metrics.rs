//! Forecast evaluation: the predictor interface, goal-error curves, leading
//! time, dataset splits, and deterministic result writers.

use crate::error::{Error, Result};
use crate::nae::NaeModel;
use crate::naedf::{self, NaedfConfig};
use crate::statespace::{make_transition_matrix, State9, GRAVITY};
use crate::trajectory::{StateSample, Trajectory};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Anything that can forecast the rest of a flight from an observed prefix.
pub trait Predictor {
    fn name(&self) -> &str;

    /// Frames that must be observed before the first forecast.
    fn min_prefix(&self) -> usize {
        5
    }

    /// Forecasts `steps` samples following the prefix, with continuing
    /// timestamps.
    fn forecast(&self, prefix: &[StateSample], dt: f64, steps: usize) -> Result<Vec<StateSample>>;
}

/// Ballistic baseline: gravity-only rollout from the last observed state.
pub struct NewtonPredictor;

impl Predictor for NewtonPredictor {
    fn name(&self) -> &str {
        "newton"
    }

    fn forecast(&self, prefix: &[StateSample], dt: f64, steps: usize) -> Result<Vec<StateSample>> {
        let last = prefix
            .last()
            .ok_or_else(|| Error::invalid("forecast needs a non-empty prefix"))?;
        let transition = make_transition_matrix(dt)?;
        let mut state = last.state;
        state.ax = 0.0;
        state.ay = 0.0;
        state.az = -GRAVITY;
        let mut x = state.to_vector();
        let mut out = Vec::with_capacity(steps);
        for step in 1..=steps {
            x = transition * x;
            out.push(StateSample {
                time: last.time + step as f64 * dt,
                state: State9::from_vector(&x),
            });
        }
        Ok(out)
    }
}

/// The recurrent estimator running free (no filter).
pub struct NaePredictor<'m> {
    pub model: &'m NaeModel,
}

impl Predictor for NaePredictor<'_> {
    fn name(&self) -> &str {
        "nae"
    }

    fn forecast(&self, prefix: &[StateSample], dt: f64, steps: usize) -> Result<Vec<StateSample>> {
        let last_time = prefix
            .last()
            .ok_or_else(|| Error::invalid("forecast needs a non-empty prefix"))?
            .time;
        // Condition on the trailing training window only; the recurrent state
        // drifts out of distribution on histories longer than it was trained on.
        let start = prefix.len().saturating_sub(self.model.window.max(1));
        let states: Vec<_> = prefix[start..].iter().map(|s| s.state).collect();
        let predicted = self.model.forecast_free(&states, steps)?;
        Ok(predicted
            .into_iter()
            .enumerate()
            .map(|(i, state)| StateSample {
                time: last_time + (i + 1) as f64 * dt,
                state,
            })
            .collect())
    }
}

/// The estimator fused with the constant-acceleration filter.
pub struct NaedfPredictor<'m> {
    pub model: &'m NaeModel,
    pub config: NaedfConfig,
}

impl Predictor for NaedfPredictor<'_> {
    fn name(&self) -> &str {
        "naedf"
    }

    fn forecast(&self, prefix: &[StateSample], dt: f64, steps: usize) -> Result<Vec<StateSample>> {
        // Anchor the filter on the trailing training window (never fewer than
        // the two frames filtering needs); like the free-running predictor,
        // the measurement network drifts out of distribution on histories
        // longer than it was trained on.
        let start = prefix.len().saturating_sub(self.model.window.max(2));
        naedf::forecast(self.model, &self.config, &prefix[start..], dt, steps)
    }
}

/// Ground truth disguised as a predictor; upper-bounds every metric.
pub struct OraclePredictor {
    pub trajectory: Trajectory,
}

impl Predictor for OraclePredictor {
    fn name(&self) -> &str {
        "oracle"
    }

    fn forecast(&self, prefix: &[StateSample], dt: f64, steps: usize) -> Result<Vec<StateSample>> {
        let last = prefix
            .last()
            .ok_or_else(|| Error::invalid("forecast needs a non-empty prefix"))?;
        let index = (last.time / dt).round() as usize;
        let own = self.trajectory.samples.get(index).ok_or_else(|| {
            Error::invalid("oracle predictor asked about a time past its trajectory")
        })?;
        if (own.time - last.time).abs() > 1e-9
            || (own.state.position() - last.state.position()).norm() > 1e-9
        {
            return Err(Error::invalid(
                "oracle predictor prefix does not lie on its trajectory",
            ));
        }
        if index + steps >= self.trajectory.len() {
            return Err(Error::invalid(
                "oracle predictor asked to forecast past the end of its trajectory",
            ));
        }
        Ok(self.trajectory.samples[index + 1..=index + steps].to_vec())
    }
}

/// Goal-position error of one forecast made `frames_remaining` before the end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub frames_remaining: usize,
    /// Seconds between the last observed frame and the goal frame.
    pub remaining_time: f64,
    /// Euclidean distance between predicted and true goal positions, meters.
    pub position_error: f64,
}

/// Forecasts the goal position from every admissible cutoff of the
/// trajectory. Points are ordered by decreasing remaining time.
pub fn accumulated_error_curve<P: Predictor + ?Sized>(
    predictor: &P,
    trajectory: &Trajectory,
) -> Result<Vec<CurvePoint>> {
    let n = trajectory.len();
    let min_prefix = predictor.min_prefix().max(1);
    if n <= min_prefix {
        return Err(Error::invalid(format!(
            "trajectory {} has {n} frames; need more than {min_prefix}",
            trajectory.object_id
        )));
    }
    let goal = trajectory.goal();
    let mut curve = Vec::with_capacity(n - min_prefix);
    for cutoff in min_prefix..n {
        let steps = n - cutoff;
        let predicted = predictor.forecast(&trajectory.samples[..cutoff], trajectory.dt, steps)?;
        if predicted.len() != steps {
            return Err(Error::invalid(format!(
                "{} returned {} samples, expected {steps}",
                predictor.name(),
                predicted.len()
            )));
        }
        let predicted_goal = predicted.last().unwrap();
        curve.push(CurvePoint {
            frames_remaining: steps,
            remaining_time: steps as f64 * trajectory.dt,
            position_error: (predicted_goal.state.position() - goal.state.position()).norm(),
        });
    }
    Ok(curve)
}

/// Default accuracy band for leading time: one centimeter.
pub const LEADING_TIME_THRESHOLD: f64 = 0.01;

/// How early the goal estimate becomes accurate and stays accurate: the
/// largest remaining time whose error and all later errors are inside the
/// threshold. Zero if accuracy is never sustained through the final cutoff.
pub fn leading_time(curve: &[CurvePoint], threshold: f64) -> f64 {
    let mut lead = 0.0;
    for point in curve.iter().rev() {
        if point.position_error < threshold {
            lead = point.remaining_time;
        } else {
            break;
        }
    }
    lead
}

/// Leading time of every trajectory under one predictor, evaluated in
/// parallel with a stable output order.
pub fn leading_times<P: Predictor + Sync + ?Sized>(
    predictor: &P,
    trajectories: &[Trajectory],
    threshold: f64,
) -> Result<Vec<f64>> {
    trajectories
        .par_iter()
        .map(|t| Ok(leading_time(&accumulated_error_curve(predictor, t)?, threshold)))
        .collect()
}

/// Sample mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Error at an exact number of remaining frames, if the curve reaches it.
pub fn error_at_remaining_frames(curve: &[CurvePoint], frames: usize) -> Option<f64> {
    curve
        .iter()
        .find(|p| p.frames_remaining == frames)
        .map(|p| p.position_error)
}

/// Deterministic shuffled split; the second part holds `test_fraction` of the
/// trajectories (at least one, at most all but one).
pub fn train_test_split(
    trajectories: &[Trajectory],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    if trajectories.len() < 2 {
        return Err(Error::invalid("need at least two trajectories to split"));
    }
    if !(0.0..1.0).contains(&test_fraction) || test_fraction <= 0.0 {
        return Err(Error::invalid("test fraction must be in (0, 1)"));
    }
    let n = trajectories.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let test: Vec<Trajectory> = indices[..n_test]
        .iter()
        .map(|&i| trajectories[i].clone())
        .collect();
    let train: Vec<Trajectory> = indices[n_test..]
        .iter()
        .map(|&i| trajectories[i].clone())
        .collect();
    Ok((train, test))
}

/// Mean leading time of each predictor (rows, trained per object class) on
/// each held-out set (columns).
pub fn generalization_matrix<P: Predictor + Sync>(
    predictors: &[P],
    test_sets: &[Vec<Trajectory>],
    threshold: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut matrix = Vec::with_capacity(predictors.len());
    for p in predictors {
        let mut row = Vec::with_capacity(test_sets.len());
        for set in test_sets {
            let times = leading_times(p, set, threshold)?;
            row.push(mean_std(&times).0);
        }
        matrix.push(row);
    }
    Ok(matrix)
}

fn open_writer(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// One leading-time measurement for the result tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadingTimeRow {
    pub predictor: String,
    pub trajectory: String,
    pub leading_time: f64,
}

/// Writes `predictor,trajectory,leading_time` rows; the optional
/// configuration hash goes into a leading comment so re-runs of the same
/// config are byte-identical.
pub fn write_leading_times_csv(
    path: &Path,
    rows: &[LeadingTimeRow],
    config_hash: Option<&str>,
) -> Result<()> {
    let mut w = open_writer(path)?;
    if let Some(hash) = config_hash {
        writeln!(w, "# config_hash={hash}")?;
    }
    writeln!(w, "predictor,trajectory,leading_time")?;
    for row in rows {
        writeln!(w, "{},{},{}", row.predictor, row.trajectory, row.leading_time)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every curve point as
/// `predictor,trajectory,frames_remaining,remaining_time,position_error`.
pub fn write_error_curves_csv(
    path: &Path,
    curves: &[(String, String, Vec<CurvePoint>)],
    config_hash: Option<&str>,
) -> Result<()> {
    let mut w = open_writer(path)?;
    if let Some(hash) = config_hash {
        writeln!(w, "# config_hash={hash}")?;
    }
    writeln!(w, "predictor,trajectory,frames_remaining,remaining_time,position_error")?;
    for (predictor, trajectory, curve) in curves {
        for p in curve {
            writeln!(
                w,
                "{},{},{},{},{}",
                predictor, trajectory, p.frames_remaining, p.remaining_time, p.position_error
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Aggregated evaluation result for one predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSummary {
    pub predictor: String,
    pub mean_leading_time: f64,
    pub std_leading_time: f64,
    pub trajectories: usize,
}

/// Evaluation summary serialized to JSON next to the CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_hash: Option<String>,
    pub threshold: f64,
    pub predictors: Vec<PredictorSummary>,
}

pub fn write_summary_json(path: &Path, summary: &EvalSummary) -> Result<()> {
    let mut w = open_writer(path)?;
    serde_json::to_writer_pretty(&mut w, summary)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}
