//! Dataset persistence: a JSON-lines trajectory format and a CSV import path
//! for position-only capture logs.

use crate::error::{Error, Result};
use crate::flight::states_from_positions;
use crate::statespace::State9;
use crate::trajectory::{StateSample, Trajectory};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// A set of trajectories sharing one sample rate and object identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub object_id: String,
    pub dt: f64,
    pub trajectories: Vec<Trajectory>,
    /// Hash of the configuration that produced this dataset, if any.
    pub config_hash: Option<String>,
}

impl Dataset {
    pub fn new(object_id: impl Into<String>, trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::invalid("dataset must contain at least one trajectory"));
        }
        let dt = trajectories[0].dt;
        for t in &trajectories {
            if (t.dt - dt).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "trajectory {} has dt {} but dataset uses {dt}",
                    t.object_id, t.dt
                )));
            }
        }
        Ok(Dataset {
            object_id: object_id.into(),
            dt,
            trajectories,
            config_hash: None,
        })
    }

    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = Some(hash.into());
        self
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    object_id: String,
    dt: f64,
    n_trajectories: usize,
    fields: Vec<String>,
    #[serde(default)]
    config_hash: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRecord {
    id: String,
    samples: Vec<Vec<Option<f64>>>,
}

const FIELDS: [&str; 10] = ["t", "px", "py", "pz", "vx", "vy", "vz", "ax", "ay", "az"];

/// Writes the dataset as a header line followed by one JSON record per
/// trajectory. Ten columns per sample: time, position, velocity, acceleration.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = Header {
        object_id: dataset.object_id.clone(),
        dt: dataset.dt,
        n_trajectories: dataset.trajectories.len(),
        fields: FIELDS.iter().map(|s| s.to_string()).collect(),
        config_hash: dataset.config_hash.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for traj in &dataset.trajectories {
        let record = TrajectoryRecord {
            id: traj.object_id.clone(),
            samples: traj
                .samples
                .iter()
                .map(|s| {
                    let mut row = vec![Some(s.time)];
                    row.extend(s.state.to_array().iter().map(|&x| Some(x)));
                    row
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`]. Records whose velocity or
/// acceleration columns are null are reconstructed by finite differences of
/// the stored positions.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::invalid(format!("{}: empty dataset file", path.display())))?;
    let header: Header = serde_json::from_str(&first?).map_err(|e| Error::Parse {
        line: 1,
        field: "header".into(),
        message: e.to_string(),
    })?;
    if header.fields != FIELDS {
        return Err(Error::Parse {
            line: 1,
            field: "fields".into(),
            message: format!("unsupported field list {:?}", header.fields),
        });
    }
    let mut trajectories = Vec::with_capacity(header.n_trajectories);
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            field: "trajectory".into(),
            message: e.to_string(),
        })?;
        trajectories.push(record_to_trajectory(record, header.dt, line_no)?);
    }
    if trajectories.len() != header.n_trajectories {
        return Err(Error::Parse {
            line: 1,
            field: "n_trajectories".into(),
            message: format!(
                "header promises {} trajectories, file holds {}",
                header.n_trajectories,
                trajectories.len()
            ),
        });
    }
    let mut dataset = Dataset::new(header.object_id, trajectories)?;
    dataset.config_hash = header.config_hash;
    Ok(dataset)
}

fn record_to_trajectory(record: TrajectoryRecord, dt: f64, line_no: usize) -> Result<Trajectory> {
    let mut full_rows = Vec::with_capacity(record.samples.len());
    let mut any_missing = false;
    for (i, row) in record.samples.iter().enumerate() {
        if row.len() != 10 {
            return Err(Error::Parse {
                line: line_no,
                field: format!("samples[{i}]"),
                message: format!("expected 10 columns, got {}", row.len()),
            });
        }
        for (j, col) in row.iter().enumerate().take(4) {
            if col.is_none() {
                return Err(Error::Parse {
                    line: line_no,
                    field: format!("samples[{i}].{}", FIELDS[j]),
                    message: "time and position may not be null".into(),
                });
            }
        }
        if row[4..].iter().any(|c| c.is_none()) {
            any_missing = true;
        }
        full_rows.push(row.clone());
    }
    if any_missing {
        let positions: Vec<(f64, [f64; 3])> = full_rows
            .iter()
            .map(|r| {
                (
                    r[0].unwrap(),
                    [r[1].unwrap(), r[2].unwrap(), r[3].unwrap()],
                )
            })
            .collect();
        let mut traj = states_from_positions(&positions, dt)?;
        traj.object_id = record.id;
        Ok(traj)
    } else {
        let samples = full_rows
            .iter()
            .map(|r| {
                let vals: Vec<f64> = r.iter().map(|c| c.unwrap()).collect();
                StateSample {
                    time: vals[0],
                    state: State9::from_array([
                        vals[1], vals[2], vals[3], vals[4], vals[5], vals[6], vals[7], vals[8],
                        vals[9],
                    ]),
                }
            })
            .collect();
        Trajectory::new(record.id, dt, samples)
    }
}

/// Column layout of an external position CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvMapping {
    pub time_column: String,
    pub x_column: String,
    pub y_column: String,
    pub z_column: String,
    /// Multiplier applied to positions (e.g. 0.001 for millimeter logs).
    pub position_scale: f64,
}

impl Default for CsvMapping {
    fn default() -> Self {
        CsvMapping {
            time_column: "t".into(),
            x_column: "x".into(),
            y_column: "y".into(),
            z_column: "z".into(),
            position_scale: 1.0,
        }
    }
}

/// Imports a single position-only trajectory from CSV, deriving velocity and
/// acceleration by finite differences.
pub fn import_positions_csv(path: &Path, mapping: &CsvMapping) -> Result<Trajectory> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        line: 1,
        field: "csv".into(),
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            field: "header".into(),
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            field: name.to_string(),
            message: format!("column '{name}' not found in {:?}", headers),
        })
    };
    let (ti, xi, yi, zi) = (
        col(&mapping.time_column)?,
        col(&mapping.x_column)?,
        col(&mapping.y_column)?,
        col(&mapping.z_column)?,
    );
    let mut positions = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let line_no = idx + 2;
        let row = row.map_err(|e| Error::Parse {
            line: line_no,
            field: "row".into(),
            message: e.to_string(),
        })?;
        let parse = |i: usize, name: &str| -> Result<f64> {
            row.get(i)
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    field: name.to_string(),
                    message: "missing column".into(),
                })?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse {
                    line: line_no,
                    field: name.to_string(),
                    message: e.to_string(),
                })
        };
        let t = parse(ti, &mapping.time_column)?;
        let s = mapping.position_scale;
        positions.push((
            t,
            [
                s * parse(xi, &mapping.x_column)?,
                s * parse(yi, &mapping.y_column)?,
                s * parse(zi, &mapping.z_column)?,
            ],
        ));
    }
    if positions.len() < 5 {
        return Err(Error::invalid(format!(
            "{}: need at least 5 rows, got {}",
            path.display(),
            positions.len()
        )));
    }
    let dt = positions[1].0 - positions[0].0;
    if !(dt > 0.0) {
        return Err(Error::Parse {
            line: 3,
            field: mapping.time_column.clone(),
            message: "timestamps must be strictly increasing".into(),
        });
    }
    states_from_positions(&positions, dt)
}
