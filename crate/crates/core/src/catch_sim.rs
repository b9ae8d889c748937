//! Closed-loop catch simulation: a point effector confined to a spherical
//! shell chases the predicted interception point at every control frame.

use crate::error::{Error, Result};
use crate::metrics::Predictor;
use crate::trajectory::{StateSample, Trajectory};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Reachable region of the effector: a spherical shell around the base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workspace {
    pub center: [f64; 3],
    pub inner_radius: f64,
    pub outer_radius: f64,
}

impl Workspace {
    pub fn validate(&self) -> Result<()> {
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("workspace center must be finite"));
        }
        if !(self.inner_radius >= 0.0
            && self.outer_radius.is_finite()
            && self.inner_radius < self.outer_radius)
        {
            return Err(Error::invalid(
                "workspace needs 0 <= inner_radius < outer_radius",
            ));
        }
        Ok(())
    }

    pub fn center_vec(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    pub fn contains(&self, point: &Vector3<f64>) -> bool {
        let r = (point - self.center_vec()).norm();
        r >= self.inner_radius && r <= self.outer_radius
    }
}

/// Whether the approach law saturates on squared or plain distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    Squared,
    Euclidean,
}

/// Saturating approach law: speed = v_max * (1 - e^{-k d}) / (1 + e^{-k d}).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlLaw {
    pub gain: f64,
    pub max_speed: f64,
    pub distance_mode: DistanceMode,
}

impl Default for ControlLaw {
    fn default() -> Self {
        ControlLaw {
            gain: 12.0,
            max_speed: 1.85,
            distance_mode: DistanceMode::Squared,
        }
    }
}

impl ControlLaw {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return Err(Error::invalid("control gain must be positive"));
        }
        if !(self.max_speed.is_finite() && self.max_speed > 0.0) {
            return Err(Error::invalid("max effector speed must be positive"));
        }
        Ok(())
    }

    /// Commanded speed at a given separation; strictly below `max_speed` for
    /// finite separations and exactly zero on target.
    pub fn speed(&self, separation: f64) -> f64 {
        let d = match self.distance_mode {
            DistanceMode::Squared => separation * separation,
            DistanceMode::Euclidean => separation,
        };
        let e = (-self.gain * d).exp();
        self.max_speed * (1.0 - e) / (1.0 + e)
    }
}

/// Velocity that steers the effector toward the target under the law.
pub fn velocity_command(
    law: &ControlLaw,
    effector: &Vector3<f64>,
    target: &Vector3<f64>,
) -> Vector3<f64> {
    let offset = target - effector;
    let separation = offset.norm();
    if separation == 0.0 {
        return Vector3::zeros();
    }
    offset * (law.speed(separation) / separation)
}

/// Where and when a predicted flight first crosses into the workspace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterceptionPoint {
    pub position: Vector3<f64>,
    pub time: f64,
    /// Index of the first predicted sample inside the workspace.
    pub index: usize,
}

/// Earliest point of the sample sequence inside the workspace shell. The
/// boundary crossing is refined by solving the quadratic |p(s) - c|^2 = r^2
/// on the segment between the last outside and first inside samples.
pub fn interception_point(
    predicted: &[StateSample],
    workspace: &Workspace,
) -> Option<InterceptionPoint> {
    let center = workspace.center_vec();
    let k = predicted
        .iter()
        .position(|s| workspace.contains(&s.state.position()))?;
    if k == 0 {
        return Some(InterceptionPoint {
            position: predicted[0].state.position(),
            time: predicted[0].time,
            index: 0,
        });
    }
    let prev = &predicted[k - 1];
    let curr = &predicted[k];
    let p0 = prev.state.position();
    let p1 = curr.state.position();
    // The previous sample is outside the shell: either beyond the outer
    // sphere or inside the inner hole. Refine the crossing of that boundary.
    let boundary = if (p0 - center).norm() > workspace.outer_radius {
        workspace.outer_radius
    } else {
        workspace.inner_radius
    };
    let seg = p1 - p0;
    let rel = p0 - center;
    let a = seg.norm_squared();
    let b = 2.0 * seg.dot(&rel);
    let c = rel.norm_squared() - boundary * boundary;
    let mut s = 1.0;
    if a > 0.0 {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sqrt_disc = disc.sqrt();
            let candidates = [(-b - sqrt_disc) / (2.0 * a), (-b + sqrt_disc) / (2.0 * a)];
            if let Some(root) = candidates
                .iter()
                .copied()
                .filter(|r| (-1e-9..=1.0 + 1e-9).contains(r))
                .reduce(f64::min)
            {
                s = root.clamp(0.0, 1.0);
            }
        }
    }
    Some(InterceptionPoint {
        position: p0 + seg * s,
        time: prev.time + s * (curr.time - prev.time),
        index: k,
    })
}

/// Full scenario for one catching run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatchConfig {
    pub workspace: Workspace,
    #[serde(default)]
    pub law: ControlLaw,
    /// Catch counts when the effector is within this distance of the ball
    /// while the ball is inside the workspace.
    #[serde(default = "default_basket_radius")]
    pub basket_radius: f64,
    /// Observed frames required before the first forecast is issued.
    #[serde(default = "default_dispatch_after")]
    pub dispatch_after: usize,
    pub effector_home: [f64; 3],
}

fn default_basket_radius() -> f64 {
    0.10
}

fn default_dispatch_after() -> usize {
    5
}

impl CatchConfig {
    pub fn new(workspace: Workspace, effector_home: [f64; 3]) -> Self {
        CatchConfig {
            workspace,
            law: ControlLaw::default(),
            basket_radius: default_basket_radius(),
            dispatch_after: default_dispatch_after(),
            effector_home,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.workspace.validate()?;
        self.law.validate()?;
        if !(self.basket_radius.is_finite() && self.basket_radius > 0.0) {
            return Err(Error::invalid("basket radius must be positive"));
        }
        if self.dispatch_after == 0 {
            return Err(Error::invalid("dispatch_after must be at least 1"));
        }
        if !self.effector_home.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("effector home must be finite"));
        }
        Ok(())
    }
}

/// Outcome of one simulated catch attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatchResult {
    pub trajectory_id: String,
    /// True flight passes through the workspace at all.
    pub feasible: bool,
    pub success: bool,
    /// Smallest effector-to-ball distance while the ball was catchable.
    pub closest_approach: Option<f64>,
    /// Flight time at which the catch condition was first met.
    pub caught_at: Option<f64>,
    pub max_effector_speed: f64,
    pub final_effector_position: [f64; 3],
}

/// Runs the control loop at the trajectory's frame rate: re-forecast, re-aim,
/// move one step, check the catch condition against the true ball position.
pub fn simulate_catch<P: Predictor + ?Sized>(
    predictor: &P,
    trajectory: &Trajectory,
    config: &CatchConfig,
) -> Result<CatchResult> {
    config.validate()?;
    let n = trajectory.len();
    let dt = trajectory.dt;
    let dispatch = config.dispatch_after.max(predictor.min_prefix());
    if n <= dispatch {
        return Err(Error::invalid(format!(
            "trajectory {} has {n} frames; catching needs more than {dispatch}",
            trajectory.object_id
        )));
    }
    let feasible = interception_point(&trajectory.samples, &config.workspace).is_some();

    let mut effector = Vector3::from(config.effector_home);
    let mut max_speed = 0.0f64;
    let mut closest: Option<f64> = None;
    let mut caught_at = None;
    for t in dispatch..n {
        let predicted = predictor.forecast(&trajectory.samples[..t], dt, n - t)?;
        let command = match interception_point(&predicted, &config.workspace) {
            Some(target) => velocity_command(&config.law, &effector, &target.position),
            None => Vector3::zeros(),
        };
        max_speed = max_speed.max(command.norm());
        effector += command * dt;

        let ball = trajectory.samples[t].state.position();
        if config.workspace.contains(&ball) {
            let dist = (ball - effector).norm();
            if closest.is_none_or(|c| dist < c) {
                closest = Some(dist);
            }
            if dist <= config.basket_radius && caught_at.is_none() {
                caught_at = Some(trajectory.samples[t].time);
            }
        }
    }
    Ok(CatchResult {
        trajectory_id: trajectory.object_id.clone(),
        feasible,
        success: feasible && caught_at.is_some(),
        closest_approach: closest,
        caught_at,
        max_effector_speed: max_speed,
        final_effector_position: [effector.x, effector.y, effector.z],
    })
}

/// Fraction of feasible throws that were caught.
pub fn success_rate(results: &[CatchResult]) -> Result<f64> {
    let feasible = results.iter().filter(|r| r.feasible).count();
    if feasible == 0 {
        return Err(Error::UndefinedRate(
            "no feasible throws in the result set".into(),
        ));
    }
    let successes = results.iter().filter(|r| r.feasible && r.success).count();
    Ok(successes as f64 / feasible as f64)
}

#[derive(Serialize)]
struct ReportHeader<'a> {
    config_hash: Option<&'a str>,
    throws: usize,
    feasible: usize,
    successes: usize,
    success_rate: Option<f64>,
}

/// JSON-lines report: a summary header followed by one record per throw.
pub fn write_catch_report(
    path: &Path,
    results: &[CatchResult],
    config_hash: Option<&str>,
) -> Result<()> {
    let feasible = results.iter().filter(|r| r.feasible).count();
    let successes = results.iter().filter(|r| r.success).count();
    let header = ReportHeader {
        config_hash,
        throws: results.len(),
        feasible,
        successes,
        success_rate: (feasible > 0).then(|| successes as f64 / feasible as f64),
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for r in results {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
