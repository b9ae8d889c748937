//! Subcommand implementations. Each takes a prepared context (resolved
//! config, its hash, created output directory) and writes artifacts with
//! fixed names into the output directory.

use crate::config::{render_resolved, Metric, RunConfig, TrainMode};
use crate::svg::{write_line_chart, Series};
use crate::CliError;
use nae_core::catch_sim::{simulate_catch, write_catch_report, CatchResult};
use nae_core::flight::{generate_dataset, load_dataset, save_dataset, Dataset};
use nae_core::metrics::{
    accumulated_error_curve, leading_time, mean_std, train_test_split, CurvePoint,
    LeadingTimeRow, NaePredictor, NaedfPredictor, NewtonPredictor, OraclePredictor, Predictor,
    PredictorSummary,
};
use nae_core::nae::{
    load_checkpoint, save_checkpoint, train_nae, Checkpoint, CHECKPOINT_VERSION,
};
use nae_core::naedf::{self, filter_window, train_naedf, NetworkMeasurementSource};
use nae_core::trajectory::StateSample;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Resolved run context shared by all subcommands.
pub struct Ctx {
    pub cfg: RunConfig,
    /// SHA-256 of the resolved config text; embedded in every artifact.
    pub hash: String,
    pub out: PathBuf,
}

impl Ctx {
    pub fn prepare(cfg: RunConfig) -> Result<Self, CliError> {
        let (text, hash) = render_resolved(&cfg)?;
        let out = cfg.output_dir.clone();
        std::fs::create_dir_all(&out)
            .map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        let copy = out.join("resolved-config.toml");
        std::fs::write(&copy, text).map_err(|e| CliError::Io(format!("{}: {e}", copy.display())))?;
        Ok(Ctx { cfg, hash, out })
    }
}

fn load_dataset_arg(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::Io(format!("{}: no such file", path.display())));
    }
    Ok(load_dataset(path)?)
}

fn load_checkpoint_arg(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Io(format!("{}: no such file", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

pub fn gen_data(ctx: &Ctx) -> Result<(), CliError> {
    let trajectories = generate_dataset(
        &ctx.cfg.throws,
        &ctx.cfg.object,
        ctx.cfg.dataset.count,
        ctx.cfg.seed,
    )?;
    let dataset =
        Dataset::new(ctx.cfg.dataset.object_id.clone(), trajectories)?.with_config_hash(&ctx.hash);
    let path = ctx.out.join("dataset.jsonl");
    save_dataset(&dataset, &path)?;
    println!("wrote {} trajectories to {}", dataset.len(), path.display());
    Ok(())
}

pub fn train(ctx: &Ctx, dataset_path: &Path) -> Result<(), CliError> {
    let data = load_dataset_arg(dataset_path)?;
    let section = &ctx.cfg.train;
    let train_cfg = section.train_config(ctx.cfg.seed);
    let (model, report, kind) = match section.mode {
        TrainMode::Nae => {
            let (model, report) = train_nae(&data.trajectories, section.arch(), &train_cfg)?;
            (model, report, "nae")
        }
        TrainMode::Naedf => {
            let warm_path = section.warm_start.as_ref().ok_or_else(|| {
                CliError::Invalid(
                    "naedf training needs a warm-start checkpoint (train.warm_start or --warm-start)"
                        .into(),
                )
            })?;
            let warm = load_checkpoint_arg(warm_path)?;
            let (model, report) =
                train_naedf(&data.trajectories, &warm.model, &train_cfg, &ctx.cfg.filter)?;
            (model, report, "naedf")
        }
    };
    let final_loss = *report.epoch_losses.last().unwrap_or(&f64::NAN);
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        kind: kind.into(),
        model,
        seed: ctx.cfg.seed,
        epochs_trained: report.epoch_losses.len(),
        final_loss,
        config_hash: Some(ctx.hash.clone()),
    };
    let ckpt_path = ctx.out.join(format!("checkpoint-{kind}.json"));
    save_checkpoint(&checkpoint, &ckpt_path)?;

    let csv_path = ctx.out.join("loss_history.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&csv_path).map_err(io_err(&csv_path))?);
    writeln!(w, "# config_hash={}", ctx.hash).map_err(io_err(&csv_path))?;
    writeln!(w, "epoch,loss").map_err(io_err(&csv_path))?;
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, loss).map_err(io_err(&csv_path))?;
    }
    w.flush().map_err(io_err(&csv_path))?;
    let points: Vec<(f64, f64)> = report
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| ((i + 1) as f64, loss))
        .collect();
    let svg_path = ctx.out.join("loss_history.svg");
    write_line_chart(
        &svg_path,
        &format!("{kind} training loss"),
        "epoch",
        "loss",
        &[Series {
            label: kind.into(),
            points,
        }],
    )
    .map_err(io_err(&svg_path))?;
    println!(
        "trained {kind} for {} epochs, final loss {final_loss:.6}; checkpoint at {}",
        report.epoch_losses.len(),
        ckpt_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictionHeader<'a> {
    config_hash: &'a str,
    checkpoint_kind: &'a str,
    prefix_frames: usize,
    horizon: usize,
    fields: [&'a str; 10],
}

#[derive(Serialize)]
struct PredictionRecord {
    trajectory: String,
    /// First row: the state estimate at the last observed frame. Remaining
    /// rows: the forecast.
    samples: Vec<[f64; 10]>,
}

fn sample_row(s: &StateSample) -> [f64; 10] {
    let a = s.state.to_array();
    [s.time, a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]]
}

pub fn predict(ctx: &Ctx, checkpoint_path: &Path, dataset_path: &Path) -> Result<(), CliError> {
    let checkpoint = load_checkpoint_arg(checkpoint_path)?;
    let data = load_dataset_arg(dataset_path)?;
    let k = ctx.cfg.predict.prefix_frames;
    let horizon = ctx.cfg.predict.horizon;
    if k < 2 {
        return Err(CliError::Invalid("predict.prefix_frames must be at least 2".into()));
    }
    let path = ctx.out.join("predictions.jsonl");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path).map_err(io_err(&path))?);
    let header = PredictionHeader {
        config_hash: &ctx.hash,
        checkpoint_kind: &checkpoint.kind,
        prefix_frames: k,
        horizon,
        fields: ["t", "px", "py", "pz", "vx", "vy", "vz", "ax", "ay", "az"],
    };
    serde_json::to_writer(&mut w, &header).map_err(nae_core::Error::from)?;
    writeln!(w).map_err(io_err(&path))?;
    for traj in &data.trajectories {
        if traj.len() < k {
            return Err(CliError::Invalid(format!(
                "trajectory {} has {} frames, prefix needs {k}",
                traj.object_id,
                traj.len()
            )));
        }
        let prefix = &traj.samples[..k];
        // The anchor row is the state estimate at the last observed frame:
        // the filter posterior for naedf, the observation itself for nae.
        let (anchor, forecast) = if checkpoint.kind == "naedf" {
            let mut source = NetworkMeasurementSource::new(&checkpoint.model, &ctx.cfg.filter);
            let beliefs =
                filter_window(prefix, data.dt, &mut source, &ctx.cfg.filter.process_noise)?;
            let last = beliefs.last().unwrap();
            let anchor = StateSample {
                time: last.time,
                state: last.mean,
            };
            let forecast =
                naedf::forecast(&checkpoint.model, &ctx.cfg.filter, prefix, data.dt, horizon)?;
            (anchor, forecast)
        } else {
            let predictor = NaePredictor {
                model: &checkpoint.model,
            };
            (*prefix.last().unwrap(), predictor.forecast(prefix, data.dt, horizon)?)
        };
        let mut samples = Vec::with_capacity(horizon + 1);
        samples.push(sample_row(&anchor));
        samples.extend(forecast.iter().map(sample_row));
        let record = PredictionRecord {
            trajectory: traj.object_id.clone(),
            samples,
        };
        serde_json::to_writer(&mut w, &record).map_err(nae_core::Error::from)?;
        writeln!(w).map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    println!(
        "wrote predictions ({k} observed + {horizon} forecast frames) for {} trajectories to {}",
        data.trajectories.len(),
        path.display()
    );
    Ok(())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

/// Labeled predictors: the Newton baseline plus one per checkpoint.
fn build_predictors<'m>(
    checkpoints: &'m [Checkpoint],
    filter: &nae_core::naedf::NaedfConfig,
) -> Vec<(String, Box<dyn Predictor + Sync + 'm>)> {
    let mut predictors: Vec<(String, Box<dyn Predictor + Sync + 'm>)> =
        vec![("newton".into(), Box::new(NewtonPredictor))];
    for (i, c) in checkpoints.iter().enumerate() {
        let duplicates = checkpoints.iter().filter(|o| o.kind == c.kind).count() > 1;
        let label = if duplicates {
            format!("{}-{}", c.kind, i + 1)
        } else {
            c.kind.clone()
        };
        let boxed: Box<dyn Predictor + Sync + 'm> = if c.kind == "naedf" {
            Box::new(NaedfPredictor {
                model: &c.model,
                config: filter.clone(),
            })
        } else {
            Box::new(NaePredictor { model: &c.model })
        };
        predictors.push((label, boxed));
    }
    predictors
}

#[derive(Serialize)]
struct EvalRunSummary {
    config_hash: String,
    threshold: f64,
    metrics: Vec<&'static str>,
    datasets: Vec<String>,
    train_count: usize,
    test_count: usize,
    predictors: Vec<PredictorSummary>,
}

pub fn eval(ctx: &Ctx, checkpoint_paths: &[PathBuf], dataset_paths: &[PathBuf]) -> Result<(), CliError> {
    let metrics = &ctx.cfg.eval.metrics;
    if metrics.is_empty() {
        return Err(CliError::Invalid("eval.metrics is empty".into()));
    }
    let per_trajectory_metrics = metrics
        .iter()
        .any(|m| matches!(m, Metric::LeadingTime | Metric::ErrorCurve));
    if per_trajectory_metrics && dataset_paths.len() != 1 {
        return Err(CliError::Invalid(
            "leading_time and error_curve evaluate exactly one --dataset".into(),
        ));
    }
    let threshold = ctx.cfg.eval.threshold;
    if !(threshold > 0.0) {
        return Err(CliError::Invalid("eval.threshold must be positive".into()));
    }
    let checkpoints: Vec<Checkpoint> = checkpoint_paths
        .iter()
        .map(|p| load_checkpoint_arg(p))
        .collect::<Result<_, _>>()?;
    let predictors = build_predictors(&checkpoints, &ctx.cfg.filter);

    // Held-out split of the primary dataset.
    let primary = load_dataset_arg(&dataset_paths[0])?;
    let (train_part, test_part) = match ctx.cfg.eval.test_fraction {
        Some(fraction) => train_test_split(&primary.trajectories, fraction, ctx.cfg.seed)?,
        None => (Vec::new(), primary.trajectories.clone()),
    };
    println!(
        "split {}: {} train / {} test",
        dataset_paths[0].display(),
        train_part.len(),
        test_part.len()
    );

    let mut summaries = Vec::new();
    for metric in metrics {
        match metric {
            Metric::LeadingTime => {
                let mut rows = Vec::new();
                for (label, predictor) in &predictors {
                    let times: Vec<f64> = test_part
                        .par_iter()
                        .map(|t| {
                            Ok(leading_time(
                                &accumulated_error_curve(predictor.as_ref(), t)?,
                                threshold,
                            ))
                        })
                        .collect::<nae_core::Result<_>>()?;
                    let (mean, std) = mean_std(&times);
                    summaries.push(PredictorSummary {
                        predictor: label.clone(),
                        mean_leading_time: mean,
                        std_leading_time: std,
                        trajectories: times.len(),
                    });
                    rows.extend(times.iter().zip(&test_part).map(|(&lt, t)| LeadingTimeRow {
                        predictor: label.clone(),
                        trajectory: t.object_id.clone(),
                        leading_time: lt,
                    }));
                    println!("leading time {label}: {mean:.4} ± {std:.4} s");
                }
                let path = ctx.out.join("leading_times.csv");
                nae_core::metrics::write_leading_times_csv(&path, &rows, Some(&ctx.hash))?;
            }
            Metric::ErrorCurve => {
                let mut all_curves = Vec::new();
                let mut mean_series = Vec::new();
                for (label, predictor) in &predictors {
                    let curves: Vec<Vec<CurvePoint>> = test_part
                        .par_iter()
                        .map(|t| accumulated_error_curve(predictor.as_ref(), t))
                        .collect::<nae_core::Result<_>>()?;
                    mean_series.push(Series {
                        label: label.clone(),
                        points: mean_curve(&curves),
                    });
                    all_curves.extend(
                        curves
                            .into_iter()
                            .zip(&test_part)
                            .map(|(curve, t)| (label.clone(), t.object_id.clone(), curve)),
                    );
                }
                let path = ctx.out.join("error_curves.csv");
                nae_core::metrics::write_error_curves_csv(&path, &all_curves, Some(&ctx.hash))?;
                let svg_path = ctx.out.join("error_curves.svg");
                write_line_chart(
                    &svg_path,
                    "mean goal error vs. remaining frames",
                    "frames remaining",
                    "error (m)",
                    &mean_series,
                )
                .map_err(io_err(&svg_path))?;
            }
            Metric::Generalization => {
                let path = ctx.out.join("generalization.csv");
                let mut w = std::io::BufWriter::new(
                    std::fs::File::create(&path).map_err(io_err(&path))?,
                );
                writeln!(w, "# config_hash={}", ctx.hash).map_err(io_err(&path))?;
                writeln!(w, "predictor,dataset,mean_leading_time").map_err(io_err(&path))?;
                for dataset_path in dataset_paths {
                    let set = load_dataset_arg(dataset_path)?;
                    let part = match ctx.cfg.eval.test_fraction {
                        Some(fraction) => {
                            train_test_split(&set.trajectories, fraction, ctx.cfg.seed)?.1
                        }
                        None => set.trajectories,
                    };
                    let name = dataset_path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| dataset_path.display().to_string());
                    for (label, predictor) in &predictors {
                        let times: Vec<f64> = part
                            .par_iter()
                            .map(|t| {
                                Ok(leading_time(
                                    &accumulated_error_curve(predictor.as_ref(), t)?,
                                    threshold,
                                ))
                            })
                            .collect::<nae_core::Result<_>>()?;
                        writeln!(w, "{label},{name},{}", mean_std(&times).0)
                            .map_err(io_err(&path))?;
                    }
                }
                w.flush().map_err(io_err(&path))?;
            }
        }
    }

    let summary = EvalRunSummary {
        config_hash: ctx.hash.clone(),
        threshold,
        metrics: metrics.iter().map(|m| m.name()).collect(),
        datasets: dataset_paths.iter().map(|p| p.display().to_string()).collect(),
        train_count: train_part.len(),
        test_count: test_part.len(),
        predictors: summaries,
    };
    let path = ctx.out.join("summary.json");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path).map_err(io_err(&path))?);
    serde_json::to_writer_pretty(&mut w, &summary).map_err(nae_core::Error::from)?;
    writeln!(w).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Mean error per frames-remaining value over curves of equal sampling.
fn mean_curve(curves: &[Vec<CurvePoint>]) -> Vec<(f64, f64)> {
    use std::collections::BTreeMap;
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for curve in curves {
        for p in curve {
            let e = sums.entry(p.frames_remaining).or_insert((0.0, 0));
            e.0 += p.position_error;
            e.1 += 1;
        }
    }
    sums.into_iter()
        .filter(|(_, (_, n))| *n == curves.len())
        .map(|(frames, (sum, n))| (frames as f64, sum / n as f64))
        .collect()
}

pub enum CatchSource {
    Newton,
    Oracle,
    Checkpoint(PathBuf),
}

pub fn catch_sim(ctx: &Ctx, dataset_path: &Path, source: CatchSource) -> Result<(), CliError> {
    let catch_cfg = ctx.cfg.catch.clone().ok_or_else(|| {
        CliError::Invalid("catch-sim needs a [catch] section in the config".into())
    })?;
    catch_cfg.validate()?;
    let data = load_dataset_arg(dataset_path)?;
    let checkpoint = match &source {
        CatchSource::Checkpoint(path) => Some(load_checkpoint_arg(path)?),
        _ => None,
    };
    let label = match &source {
        CatchSource::Newton => "newton".to_string(),
        CatchSource::Oracle => "oracle".to_string(),
        CatchSource::Checkpoint(_) => checkpoint.as_ref().unwrap().kind.clone(),
    };
    let results: Vec<CatchResult> = data
        .trajectories
        .par_iter()
        .map(|traj| -> nae_core::Result<CatchResult> {
            match &source {
                CatchSource::Newton => simulate_catch(&NewtonPredictor, traj, &catch_cfg),
                CatchSource::Oracle => {
                    let oracle = OraclePredictor {
                        trajectory: traj.clone(),
                    };
                    simulate_catch(&oracle, traj, &catch_cfg)
                }
                CatchSource::Checkpoint(_) => {
                    let c = checkpoint.as_ref().unwrap();
                    if c.kind == "naedf" {
                        let predictor = NaedfPredictor {
                            model: &c.model,
                            config: ctx.cfg.filter.clone(),
                        };
                        simulate_catch(&predictor, traj, &catch_cfg)
                    } else {
                        let predictor = NaePredictor { model: &c.model };
                        simulate_catch(&predictor, traj, &catch_cfg)
                    }
                }
            }
        })
        .collect::<nae_core::Result<_>>()?;
    let path = ctx.out.join("catch_report.jsonl");
    write_catch_report(&path, &results, Some(&ctx.hash))?;
    let feasible = results.iter().filter(|r| r.feasible).count();
    let successes = results.iter().filter(|r| r.success).count();
    if feasible == 0 {
        println!(
            "{label}: no feasible throws among {} — rate undefined; report at {}",
            results.len(),
            path.display()
        );
    } else {
        println!(
            "{label}: caught {successes} of {feasible} feasible ({} thrown), success rate {:.3}; report at {}",
            results.len(),
            successes as f64 / feasible as f64,
            path.display()
        );
    }
    Ok(())
}
