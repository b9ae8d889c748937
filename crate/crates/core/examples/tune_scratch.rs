//! Scratch harness for tuning acceptance-scale training and evaluation.
//! Caches artifacts under /tmp/nae_tune so stages can be iterated fast.
//!
//! Usage:
//!   tune_scratch gen
//!   tune_scratch train    <tag> <dim> <epochs> <windows> <decay> [lr]
//!   tune_scratch finetune <tag> <epochs> [lr]
//!   tune_scratch diag     <tag>
//!   tune_scratch lt       <tag>
//!   tune_scratch c6       <tag>
//!   tune_scratch c7       <tag> <frac> <offset> <outer> <home: center|path|up>

use nae_core::catch_sim::{
    interception_point, simulate_catch, success_rate, CatchConfig, Workspace,
};
use nae_core::flight::{generate_dataset, load_dataset, save_dataset, Dataset, ObjectParams, ThrowConfig};
use nae_core::metrics::{
    accumulated_error_curve, error_at_remaining_frames, leading_times, mean_std,
    train_test_split, NaePredictor, NaedfPredictor, NewtonPredictor, OraclePredictor, Predictor,
    LEADING_TIME_THRESHOLD,
};
use nae_core::nae::{
    load_checkpoint, save_checkpoint, supervised_losses, train_nae, Checkpoint, ModelArch,
    NaeModel, TrainConfig, CHECKPOINT_VERSION,
};
use nae_core::naedf::{train_naedf, NaedfConfig};
use nae_core::statespace::State9;
use nae_core::Trajectory;
use nalgebra::Vector3;
use rayon::prelude::*;
use std::path::PathBuf;
use std::time::Instant;

const DATASET_SEED: u64 = 2024;
const SPLIT_SEED: u64 = 77;

fn object() -> ObjectParams {
    ObjectParams {
        mass: 0.15,
        drag_coefficient: 1.5,
        reference_area: 0.015,
        magnus_coefficient: 0.5,
        spin_axis: [0.0, 0.0, 1.0],
        spin_rate: 3.0,
        air_density: 1.2,
    }
}

fn dir() -> PathBuf {
    let d = PathBuf::from("/tmp/nae_tune");
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn throws() -> ThrowConfig {
    ThrowConfig {
        speed_range: [5.0, 5.5],
        launch_angle_range_deg: [28.0, 35.0],
        duration: 0.85,
        ..ThrowConfig::default()
    }
}

fn dataset() -> Vec<Trajectory> {
    let path = dir().join("dataset_v2.jsonl");
    if path.exists() {
        load_dataset(&path).unwrap().trajectories
    } else {
        let all = generate_dataset(&throws(), &object(), 200, DATASET_SEED).unwrap();
        save_dataset(&Dataset::new("tune", all.clone()).unwrap(), &path).unwrap();
        all
    }
}

fn split() -> (Vec<Trajectory>, Vec<Trajectory>) {
    train_test_split(&dataset(), 0.1, SPLIT_SEED).unwrap()
}

fn load_model(name: &str) -> NaeModel {
    load_checkpoint(&dir().join(name)).unwrap().model
}

fn save_model(name: &str, kind: &str, model: &NaeModel, epochs: usize, loss: f64) {
    save_checkpoint(
        &Checkpoint {
            format_version: CHECKPOINT_VERSION,
            kind: kind.into(),
            model: model.clone(),
            seed: 7,
            epochs_trained: epochs,
            final_loss: loss,
            config_hash: None,
        },
        &dir().join(name),
    )
    .unwrap();
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cmd = args.first().map(String::as_str).unwrap_or("help");
    match cmd {
        "gen" => {
            let all = dataset();
            let lens: Vec<usize> = all.iter().map(Trajectory::len).collect();
            let durs: Vec<f64> = all.iter().map(Trajectory::duration).collect();
            println!(
                "dataset: {} trajectories, frames {}..{}, duration {:.2}..{:.2} s",
                all.len(),
                lens.iter().min().unwrap(),
                lens.iter().max().unwrap(),
                durs.iter().cloned().fold(f64::INFINITY, f64::min),
                durs.iter().cloned().fold(0.0, f64::max),
            );
        }
        "train" => {
            let tag = &args[1];
            let dim: usize = args[2].parse().unwrap();
            let epochs: usize = args[3].parse().unwrap();
            let windows: usize = args[4].parse().unwrap();
            let decay: f64 = args[5].parse().unwrap();
            let lr: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
            let free: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(12);
            let w1: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(1.0);
            let w2: f64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(1.0);
            let w3: f64 = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(1.0);
            let (train, _) = split();
            let cfg = TrainConfig {
                epochs,
                learning_rate: lr,
                lr_decay: decay,
                clip_norm: 5.0,
                seed: 7,
                prefix_len: 12,
                free_run_len: free,
                loss_weights: [w1, w2, w3],
                windows_per_trajectory: windows,
            };
            let t0 = Instant::now();
            let (model, report) =
                train_nae(&train, ModelArch { embed_dim: dim, hidden_dim: dim }, &cfg).unwrap();
            for (i, l) in report.epoch_losses.iter().enumerate() {
                if i % 10 == 0 || i + 1 == report.epoch_losses.len() {
                    println!("epoch {i}: {l:.6}");
                }
            }
            println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
            save_model(
                &format!("nae_{tag}.json"),
                "nae",
                &model,
                epochs,
                *report.epoch_losses.last().unwrap(),
            );
        }
        "finetune" => {
            let tag = &args[1];
            let epochs: usize = args[2].parse().unwrap();
            let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
            let warm = load_model(&format!("nae_{tag}.json"));
            let (train, _) = split();
            let cfg = TrainConfig {
                epochs,
                learning_rate: lr,
                lr_decay: 1.0,
                clip_norm: 5.0,
                seed: 7,
                prefix_len: 12,
                free_run_len: 12,
                loss_weights: [1.0, 1.0, 1.0],
                windows_per_trajectory: 1,
            };
            let t0 = Instant::now();
            let (model, report) = train_naedf(&train, &warm, &cfg, &NaedfConfig::default()).unwrap();
            println!("naedf losses: {:?}", report.epoch_losses);
            println!("finetuned in {:.1}s", t0.elapsed().as_secs_f64());
            save_model(
                &format!("naedf_{tag}.json"),
                "naedf",
                &model,
                epochs,
                *report.epoch_losses.last().unwrap(),
            );
        }
        "diag" => {
            let tag = &args[1];
            let model = load_model(&format!("nae_{tag}.json"));
            let (_, test) = split();
            // Free-run goal error after k steps, from cutoff n-1-k.
            for k in [1usize, 3, 6, 12, 18, 24] {
                let errs: Vec<f64> = test
                    .par_iter()
                    .map(|traj| {
                        let n = traj.len();
                        let cutoff = n - 1 - k;
                        let start = cutoff.saturating_sub(model.window);
                        let states: Vec<State9> =
                            traj.samples[start..cutoff].iter().map(|s| s.state).collect();
                        let fc = model.forecast_free(&states, k + 1).unwrap();
                        (fc.last().unwrap().position() - traj.goal().state.position()).norm()
                    })
                    .collect();
                let (m, s) = mean_std(&errs);
                let max = errs.iter().cloned().fold(0.0, f64::max);
                println!("free-run {k:2} steps: goal err mean {m:.4} ± {s:.4}  max {max:.4}");
            }
            // Loss breakdown on tail windows (landing region).
            let mut teacher = 0.0;
            let mut free = 0.0;
            let mut recon = 0.0;
            for traj in &test {
                let n = traj.len();
                let frames: Vec<State9> =
                    traj.samples[n - 24..].iter().map(|s| s.state).collect();
                let l = supervised_losses(&model, &frames, 12, 12, [1.0, 1.0, 1.0]).unwrap();
                teacher += l.teacher;
                free += l.free_running;
                recon += l.reconstruction;
            }
            let n = test.len() as f64;
            println!(
                "tail-window losses: teacher {:.6}  free {:.6}  recon {:.6}",
                teacher / n,
                free / n,
                recon / n
            );
        }
        "lt" => {
            let tag = &args[1];
            let nae = load_model(&format!("nae_{tag}.json"));
            let naedf_path = dir().join(format!("naedf_{tag}.json"));
            let (_, test) = split();
            let t0 = Instant::now();
            let newton_lt = leading_times(&NewtonPredictor, &test, LEADING_TIME_THRESHOLD).unwrap();
            let nae_lt = leading_times(&NaePredictor { model: &nae }, &test, LEADING_TIME_THRESHOLD)
                .unwrap();
            let (m_newton, s_newton) = mean_std(&newton_lt);
            let (m_nae, s_nae) = mean_std(&nae_lt);
            println!("LT newton {m_newton:.4}±{s_newton:.4}  nae {m_nae:.4}±{s_nae:.4}");
            if naedf_path.exists() {
                let naedf = load_model(&format!("naedf_{tag}.json"));
                let pred = NaedfPredictor { model: &naedf, config: NaedfConfig::default() };
                let naedf_lt = leading_times(&pred, &test, LEADING_TIME_THRESHOLD).unwrap();
                let (m_naedf, s_naedf) = mean_std(&naedf_lt);
                println!("LT naedf {m_naedf:.4}±{s_naedf:.4}");
                println!(
                    "c5: naedf >= nae-0.02: {}   nae - newton = {:.4} (need >= 0.03): {}",
                    m_naedf >= m_nae - 0.02,
                    m_nae - m_newton,
                    m_nae - m_newton >= 0.03
                );
            }
            println!("({:.1}s)", t0.elapsed().as_secs_f64());
        }
        "c6" => {
            let tag = &args[1];
            let naedf = load_model(&format!("naedf_{tag}.json"));
            let pred = NaedfPredictor { model: &naedf, config: NaedfConfig::default() };
            let (_, test) = split();
            let t0 = Instant::now();
            let pairs: Vec<(f64, f64)> = test
                .par_iter()
                .map(|traj| {
                    let c_newton = accumulated_error_curve(&NewtonPredictor, traj).unwrap();
                    let c_naedf = accumulated_error_curve(&pred, traj).unwrap();
                    (
                        error_at_remaining_frames(&c_naedf, 60).unwrap(),
                        error_at_remaining_frames(&c_newton, 60).unwrap(),
                    )
                })
                .collect();
            let wins = pairs.iter().filter(|(a, b)| a < b).count();
            println!(
                "c6: naedf beats newton at 60 remaining on {wins}/{} ({:.1}s)",
                pairs.len(),
                t0.elapsed().as_secs_f64()
            );
        }
        "c7" => {
            let tag = &args[1];
            let frac: f64 = args[2].parse().unwrap();
            let offset: f64 = args[3].parse().unwrap();
            let outer: f64 = args[4].parse().unwrap();
            let home_mode = args[5].as_str();
            let naedf = load_model(&format!("naedf_{tag}.json"));
            let naedf_pred = NaedfPredictor { model: &naedf, config: NaedfConfig::default() };
            let t0 = Instant::now();
            let catch_set =
                generate_dataset(&ThrowConfig::default(), &object(), 30, DATASET_SEED + 1).unwrap();
            let configs: Vec<CatchConfig> = catch_set
                .iter()
                .map(|t| catch_scenario(t, frac, offset, outer, home_mode))
                .collect();
            let run = |predictor: &(dyn Predictor + Sync)| -> Vec<f64> {
                let results: Vec<_> = catch_set
                    .par_iter()
                    .zip(&configs)
                    .map(|(traj, cfg)| simulate_catch(predictor, traj, cfg).unwrap())
                    .collect();
                let max_speed =
                    results.iter().map(|r| r.max_effector_speed).fold(0.0, f64::max);
                let feasible = results.iter().filter(|r| r.feasible).count();
                let rate = success_rate(&results).unwrap();
                println!("  feasible {feasible}/30  rate {rate:.3}  max speed {max_speed:.6}");
                results
                    .iter()
                    .map(|r| r.closest_approach.unwrap_or(f64::INFINITY))
                    .collect()
            };
            println!("newton:");
            let d_newton = run(&NewtonPredictor);
            println!("naedf:");
            let d_naedf = run(&naedf_pred);
            println!("oracle:");
            let oracle_results: Vec<_> = catch_set
                .par_iter()
                .zip(&configs)
                .map(|(traj, cfg)| {
                    let oracle = OraclePredictor { trajectory: traj.clone() };
                    simulate_catch(&oracle, traj, cfg).unwrap()
                })
                .collect();
            let r_oracle = success_rate(&oracle_results).unwrap();
            let worst_oracle = oracle_results
                .iter()
                .map(|r| r.closest_approach.unwrap_or(f64::INFINITY))
                .fold(0.0, f64::max);
            println!("  rate {r_oracle:.3}  worst approach {worst_oracle:.4}");
            for i in 0..catch_set.len() {
                println!("  throw {i:2}: newton {:.3}  naedf {:.3}", d_newton[i], d_naedf[i]);
            }
            println!("({:.1}s)", t0.elapsed().as_secs_f64());
        }
        _ => {
            eprintln!("unknown command {cmd}");
        }
    }
}

/// Workspace shell late in flight, offset from the path; effector home
/// placed per `home_mode`.
fn catch_scenario(
    trajectory: &Trajectory,
    frac: f64,
    offset_mag: f64,
    outer: f64,
    home_mode: &str,
) -> CatchConfig {
    let n = trajectory.len();
    let idx = (frac * (n - 1) as f64).round() as usize;
    let anchor = &trajectory.samples[idx].state;
    let v = anchor.velocity();
    let side = v.cross(&Vector3::z());
    let offset = if side.norm() > 1e-6 {
        side.normalize() * offset_mag
    } else {
        Vector3::x() * offset_mag
    };
    let center = anchor.position() + offset;
    let workspace = Workspace {
        center: [center.x, center.y, center.z],
        inner_radius: 0.1,
        outer_radius: outer,
    };
    let entry = interception_point(&trajectory.samples, &workspace)
        .expect("path passes through the shell by construction");
    let home = match home_mode {
        "center" => center,
        "path" => trajectory.samples[(entry.index + 10).min(n - 1)].state.position(),
        "up" => trajectory.samples[entry.index.saturating_sub(20)].state.position(),
        other => panic!("unknown home mode {other}"),
    };
    CatchConfig::new(workspace, [home.x, home.y, home.z])
}
