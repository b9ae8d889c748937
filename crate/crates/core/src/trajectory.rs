//! Timestamped state sequences: the unit of datasets, predictions, and
//! evaluation.

use crate::error::{Error, Result};
use crate::statespace::State9;
use serde::{Deserialize, Serialize};

/// One flight state with its timestamp in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateSample {
    pub time: f64,
    pub state: State9,
}

/// A uniformly sampled sequence of flight states for one throw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub object_id: String,
    /// Sample spacing in seconds.
    pub dt: f64,
    pub samples: Vec<StateSample>,
}

/// Relative slack allowed when checking uniform timestamp spacing.
const SPACING_TOL: f64 = 1e-6;

impl Trajectory {
    /// Builds a trajectory and checks its invariants: at least 3 samples and
    /// strictly increasing timestamps with constant spacing `dt`.
    pub fn new(object_id: impl Into<String>, dt: f64, samples: Vec<StateSample>) -> Result<Self> {
        let traj = Trajectory {
            object_id: object_id.into(),
            dt,
            samples,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if self.samples.len() < 3 {
            return Err(Error::invalid(format!(
                "trajectory needs at least 3 samples, got {}",
                self.samples.len()
            )));
        }
        for (i, pair) in self.samples.windows(2).enumerate() {
            let gap = pair[1].time - pair[0].time;
            if gap <= 0.0 {
                return Err(Error::invalid(format!(
                    "timestamps must be strictly increasing: sample {} -> {}",
                    i,
                    i + 1
                )));
            }
            if (gap - self.dt).abs() > SPACING_TOL * self.dt.max(1.0) {
                return Err(Error::invalid(format!(
                    "non-uniform spacing at sample {}: gap {} vs dt {}",
                    i + 1,
                    gap,
                    self.dt
                )));
            }
        }
        for (i, s) in self.samples.iter().enumerate() {
            if !s.state.is_finite() || !s.time.is_finite() {
                return Err(Error::invalid(format!("non-finite entries at sample {i}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.time - a.time,
            _ => 0.0,
        }
    }

    /// Last sample; evaluation treats its position as the goal.
    pub fn goal(&self) -> &StateSample {
        self.samples.last().expect("trajectory has samples")
    }

    pub fn states(&self) -> impl Iterator<Item = &State9> {
        self.samples.iter().map(|s| &s.state)
    }
}
