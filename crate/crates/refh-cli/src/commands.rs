//! Implementations of the five subcommands.
//!
//! Every command is a pure function of (resolved config, seed, input files):
//! running it twice into fresh directories produces byte-identical outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{Array2, ArrayView2};

use refh_core::baselines::{
    displacement_pseudo_obs, em_fit_restarts, kalman_filter, kf0_positions, position_estimates,
    pseudo_obs_sequence, EmRestart, LdsModel,
};
use refh_core::checkpoint::{
    fmt_f64, read_checkpoint, read_train_state, write_checkpoint, write_train_state, TrainState,
};
use refh_core::dataset::{
    write_bounce_frames, write_lds_counts, write_lds_latents, BounceMeta, LdsMeta,
};
use refh_core::eval::{copy_frame_mse, decode_position, mse_position, EvalReport};
use refh_core::exp_family::UnitFamily;
use refh_core::harmonium::{HarmoniumParams, StatSource};
use refh_core::rng::{derive_key, stream};
use refh_core::temporal::{
    filter_pass, generate_forward_gibbs, generate_reverse, predict_next_frame, train_model,
    MetricsLog, PassCounts, TrainSchedule,
};
use refh_core::worldgen::generate_lds_dataset;

use crate::config::{ExperimentConfig, TaskKind};

/// Stream tag for evaluation datasets (held out from the training stream).
const TAG_EVAL_DATA: u64 = 21;
/// Stream tag for model-driven trajectory generation.
const TAG_GEN_TRAJ: u64 = 22;
/// Stream tag for next-frame prediction sampling.
const TAG_PREDICT: u64 = 23;
/// Stream tag for the EM baseline fits.
const TAG_EM_BASELINE: u64 = 24;

/// The seed that generates held-out evaluation data for a run.
fn eval_seed(cfg: &ExperimentConfig) -> u64 {
    derive_key(cfg.seed, &[TAG_EVAL_DATA])
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_resolved_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    write_text(&out.join("resolved.toml"), &cfg.resolved_toml()?)
}

fn config_json(cfg: &ExperimentConfig) -> Result<String> {
    let value = match cfg.kind {
        TaskKind::Ring => serde_json::to_string(&cfg.ring)?,
        TaskKind::Balls => serde_json::to_string(&cfg.balls)?,
    };
    Ok(value)
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// Write a dataset drawn from the task's generative world.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    ensure_out_dir(out)?;
    let n = cfg.data.n_trajectories;
    let t_len = cfg.data.traj_len;
    match cfg.kind {
        TaskKind::Ring => {
            let ds = generate_lds_dataset(&cfg.ring.world, &cfg.ring.codec, cfg.seed, n, t_len)?;
            let meta = LdsMeta {
                seed: cfg.seed,
                n_trajectories: n,
                traj_length: t_len,
                config_json: config_json(cfg)?,
            };
            write_lds_counts(&out.join("counts.csv"), &meta, &ds.counts)?;
            write_lds_latents(&out.join("latents.csv"), &meta, &ds.latents)?;
        }
        TaskKind::Balls => {
            let frames =
                refh_core::worldgen::generate_bounce_dataset(&cfg.balls.world, cfg.seed, n, t_len)?;
            let meta = BounceMeta {
                seed: cfg.seed,
                n_trajectories: n,
                traj_length: t_len,
                frame_size: cfg.balls.world.frame_size,
                config_json: config_json(cfg)?,
            };
            write_bounce_frames(&out.join("frames.csv"), &meta, &frames)?;
        }
    }
    write_resolved_config(cfg, out)?;
    println!(
        "generated {n} trajectories x {t_len} steps (seed {}) into {}",
        cfg.seed,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Train a model per the config, checkpointing at every batch renewal.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<()> {
    ensure_out_dir(out)?;
    let final_path = out.join("model.ckpt.json");
    let state_path = out.join("train-state.json");

    if cfg.schedule.epochs == 0 {
        // Zero-epoch runs checkpoint the untouched initialization.
        let params = cfg.init_params()?;
        write_checkpoint(&final_path, &params)?;
        write_text(&out.join("metrics.csv"), "epoch,batch,metric,value\n")?;
        write_resolved_config(cfg, out)?;
        println!(
            "wrote initialization checkpoint (0 epochs requested) to {}",
            final_path.display()
        );
        return Ok(());
    }

    let mut source = cfg.train_source();
    let mut log = MetricsLog::default();
    let schedule: &TrainSchedule = &cfg.schedule;

    let snapshot_dir = out.to_path_buf();
    let mut hook = move |state: &TrainState| -> refh_core::error::Result<()> {
        write_train_state(&snapshot_dir.join("train-state.json"), state)?;
        write_checkpoint(
            &snapshot_dir.join(format!("checkpoint-{:04}.json", state.epochs_done)),
            &state.params,
        )?;
        Ok(())
    };

    let final_state = if resume {
        if !state_path.exists() {
            bail!(
                "--resume requested but {} does not exist",
                state_path.display()
            );
        }
        let state = read_train_state(&state_path)?;
        if state.params.n_obs() != cfg.obs_spec().len()
            || state.params.n_hid() != cfg.model.hidden
        {
            bail!("train state at {} does not match the config's model shape", state_path.display());
        }
        println!("resuming from epoch {}", state.epochs_done);
        refh_core::temporal::train_from_state(
            cfg.model.variant.kind(),
            state,
            source.as_mut(),
            schedule,
            cfg.seed,
            &mut log,
            Some(&mut hook),
        )?
    } else {
        train_model(
            cfg.model.variant.kind(),
            cfg.init_params()?,
            source.as_mut(),
            schedule,
            cfg.seed,
            &mut log,
            Some(&mut hook),
        )?
    };

    write_checkpoint(&final_path, &final_state.params)?;
    write_text(&out.join("metrics.csv"), &log.to_csv())?;
    write_resolved_config(cfg, out)?;
    let last_recon = log
        .rows
        .iter()
        .rev()
        .find(|r| r.metric == "recon_error")
        .map(|r| r.value);
    match last_recon {
        Some(v) => println!(
            "trained {} ({} hidden) for {} epochs; final reconstruction error {v:.6}; checkpoint at {}",
            cfg.model.variant.name(),
            cfg.model.hidden,
            final_state.epochs_done,
            final_path.display()
        ),
        None => println!(
            "trained {} ({} hidden) for {} epochs; checkpoint at {}",
            cfg.model.variant.name(),
            cfg.model.hidden,
            final_state.epochs_done,
            final_path.display()
        ),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Held-out ring data plus the decoded truth positions.
struct RingEvalData {
    counts: Vec<Array2<f64>>,
    positions: Vec<Vec<f64>>,
}

fn ring_eval_data(cfg: &ExperimentConfig) -> Result<RingEvalData> {
    let ds = generate_lds_dataset(
        &cfg.ring.world,
        &cfg.ring.codec,
        eval_seed(cfg),
        cfg.data.n_trajectories,
        cfg.data.traj_len,
    )?;
    let positions = ds
        .latents
        .iter()
        .map(|l| l.column(0).to_vec())
        .collect();
    Ok(RingEvalData {
        counts: ds.counts,
        positions,
    })
}

/// Decode a trained model's filtering estimates on one count trajectory.
fn model_position_estimates(
    params: &HarmoniumParams,
    cfg: &ExperimentConfig,
    counts: &ArrayView2<f64>,
) -> Result<Vec<f64>> {
    let means = filter_pass(params, counts)?;
    let mut out = Vec::with_capacity(means.nrows());
    for t in 0..means.nrows() {
        out.push(decode_position(params, &means.row(t), &cfg.ring.codec)?);
    }
    Ok(out)
}

fn report_from_positions(
    model: &str,
    estimates: &[Vec<f64>],
    truths: &[Vec<f64>],
    length: f64,
) -> Result<EvalReport> {
    let mut per_traj = Vec::with_capacity(estimates.len());
    for (est, truth) in estimates.iter().zip(truths) {
        per_traj.push(mse_position(est, truth, length)?);
    }
    let steps = truths.first().map(|t| t.len()).unwrap_or(0);
    Ok(EvalReport::new(model, per_traj, steps)?)
}

/// One fitted linear baseline applied to every held-out trajectory.
fn lds_model_report(
    name: &str,
    model: &LdsModel,
    cfg: &ExperimentConfig,
    data: &RingEvalData,
) -> Result<EvalReport> {
    let length = cfg.ring.codec.length;
    let mut estimates = Vec::with_capacity(data.counts.len());
    for counts in &data.counts {
        let obs = displacement_pseudo_obs(&cfg.ring.codec, &counts.view())?;
        let run = kalman_filter(model, &obs, Some(length))?;
        estimates.push(position_estimates(&run, length));
    }
    report_from_positions(name, &estimates, &data.positions, length)
}

fn kf0_report(cfg: &ExperimentConfig, data: &RingEvalData) -> Result<EvalReport> {
    let length = cfg.ring.codec.length;
    let mut estimates = Vec::with_capacity(data.counts.len());
    for counts in &data.counts {
        let obs = pseudo_obs_sequence(&cfg.ring.codec, &counts.view())?;
        estimates.push(kf0_positions(&obs, length));
    }
    report_from_positions("kf0", &estimates, &data.positions, length)
}

/// EM training sequences: the standard training batch in displacement form.
fn em_training_sequences(cfg: &ExperimentConfig) -> Result<Vec<Vec<(f64, f64)>>> {
    let ds = generate_lds_dataset(
        &cfg.ring.world,
        &cfg.ring.codec,
        cfg.seed,
        cfg.data.n_trajectories,
        cfg.data.traj_len,
    )?;
    ds.counts
        .iter()
        .map(|c| Ok(displacement_pseudo_obs(&cfg.ring.codec, &c.view())?))
        .collect()
}

fn em_baseline_restarts(cfg: &ExperimentConfig, order: usize) -> Result<Vec<EmRestart>> {
    let sequences = em_training_sequences(cfg)?;
    Ok(em_fit_restarts(
        order,
        &sequences,
        cfg.baselines.em_iters,
        cfg.baselines.em_restarts,
        derive_key(cfg.seed, &[TAG_EM_BASELINE, order as u64]),
    )?)
}

fn best_restart(restarts: &[EmRestart]) -> usize {
    let mut best = 0;
    for (j, r) in restarts.iter().enumerate() {
        if r.final_ll() > restarts[best].final_ll() {
            best = j;
        }
    }
    best
}

/// Evaluate a checkpoint on held-out data; optionally add baseline rows.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: &Path,
    with_baselines: bool,
) -> Result<()> {
    ensure_out_dir(out)?;
    let params = read_checkpoint(checkpoint)?;
    let expected_obs = cfg.obs_spec();
    if params.n_obs() != expected_obs.len() {
        bail!(
            "checkpoint has {} observation units but the config expects {}",
            params.n_obs(),
            expected_obs.len()
        );
    }

    let mut reports: Vec<EvalReport> = Vec::new();
    match cfg.kind {
        TaskKind::Ring => {
            let data = ring_eval_data(cfg)?;
            let mut estimates = Vec::with_capacity(data.counts.len());
            for counts in &data.counts {
                estimates.push(model_position_estimates(&params, cfg, &counts.view())?);
            }
            reports.push(report_from_positions(
                cfg.model.variant.name(),
                &estimates,
                &data.positions,
                cfg.ring.codec.length,
            )?);
            if with_baselines {
                reports.push(kf0_report(cfg, &data)?);
                reports.push(lds_model_report(
                    "kfopt",
                    &LdsModel::from_world(&cfg.ring.world)?,
                    cfg,
                    &data,
                )?);
                for order in [1usize, 2] {
                    let restarts = em_baseline_restarts(cfg, order)?;
                    let best = best_restart(&restarts);
                    reports.push(lds_model_report(
                        &format!("kf{order}"),
                        &restarts[best].model,
                        cfg,
                        &data,
                    )?);
                }
            }
        }
        TaskKind::Balls => {
            let frames = refh_core::worldgen::generate_bounce_dataset(
                &cfg.balls.world,
                eval_seed(cfg),
                cfg.data.n_trajectories,
                cfg.data.traj_len,
            )?;
            let seed = eval_seed(cfg);
            let mut per_traj = Vec::with_capacity(frames.len());
            let mut per_traj_copy = Vec::with_capacity(frames.len());
            for (j, traj) in frames.iter().enumerate() {
                per_traj.push(next_frame_mse(&params, cfg, traj, seed, j as u64)?);
                per_traj_copy.push(copy_frame_mse(&traj.view())?);
            }
            let steps = cfg.data.traj_len.saturating_sub(1);
            reports.push(EvalReport::new(cfg.model.variant.name(), per_traj, steps)?);
            reports.push(EvalReport::new("copy-frame", per_traj_copy, steps)?);
        }
    }

    let mut csv = String::new();
    for (i, report) in reports.iter().enumerate() {
        let text = report.to_csv();
        if i == 0 {
            csv.push_str(&text);
        } else {
            // Subsequent reports share the header.
            let body = text.splitn(2, '\n').nth(1).unwrap_or("");
            csv.push_str(body);
        }
    }
    write_text(&out.join("eval.csv"), &csv)?;
    write_resolved_config(cfg, out)?;
    for report in &reports {
        println!(
            "{}: mse {} over {} trajectories",
            report.model,
            fmt_f64(report.aggregate_mse),
            report.per_trajectory_mse.len()
        );
    }
    Ok(())
}

/// Mean next-frame prediction error of a movie model over one trajectory.
fn next_frame_mse(
    params: &HarmoniumParams,
    cfg: &ExperimentConfig,
    frames: &Array2<f64>,
    seed: u64,
    traj_index: u64,
) -> Result<f64> {
    let means = filter_pass(params, &frames.view())?;
    let t_len = frames.nrows();
    if t_len < 2 {
        bail!("next-frame evaluation needs at least two frames");
    }
    let mut total = 0.0;
    for t in 1..t_len {
        let mut rng = stream(seed, &[TAG_PREDICT, traj_index, t as u64]);
        let predicted = predict_next_frame(params, &means.row(t - 1), cfg.predict, &mut rng)?;
        let actual = frames.row(t);
        let n = predicted.len() as f64;
        let sq = predicted
            .iter()
            .zip(actual.iter())
            .map(|(p, a)| (p - a) * (p - a))
            .sum::<f64>();
        total += sq / n;
    }
    Ok(total / (t_len - 1) as f64)
}

// ---------------------------------------------------------------------------
// benchmark
// ---------------------------------------------------------------------------

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Run the linear-baseline suite on held-out ring data.
pub fn cmd_benchmark(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if cfg.kind != TaskKind::Ring {
        bail!("benchmark applies to the ring task only");
    }
    ensure_out_dir(out)?;
    let data = ring_eval_data(cfg)?;

    let mut csv = String::from("model,restart,mse\n");
    let mut medians: Vec<(String, f64)> = Vec::new();

    let kf0 = kf0_report(cfg, &data)?;
    let _ = writeln!(csv, "kf0,,{}", fmt_f64(kf0.aggregate_mse));
    medians.push(("kf0".into(), kf0.aggregate_mse));

    let kfopt = lds_model_report("kfopt", &LdsModel::from_world(&cfg.ring.world)?, cfg, &data)?;
    let _ = writeln!(csv, "kfopt,,{}", fmt_f64(kfopt.aggregate_mse));
    medians.push(("kfopt".into(), kfopt.aggregate_mse));

    for order in [1usize, 2] {
        let restarts = em_baseline_restarts(cfg, order)?;
        let mut mses = Vec::with_capacity(restarts.len());
        for (j, restart) in restarts.iter().enumerate() {
            let report = lds_model_report(&format!("kf{order}"), &restart.model, cfg, &data)?;
            let _ = writeln!(csv, "kf{order},{j},{}", fmt_f64(report.aggregate_mse));
            mses.push(report.aggregate_mse);
        }
        medians.push((format!("kf{order}"), median(&mut mses)));
    }

    let get = |name: &str| medians.iter().find(|(n, _)| n == name).unwrap().1;
    let ordered = get("kfopt") <= get("kf2") && get("kf2") <= get("kf1") && get("kf1") <= get("kf0");
    let _ = writeln!(
        csv,
        "# median ordering kfopt<=kf2<=kf1<=kf0: {ordered} (kfopt {}, kf2 {}, kf1 {}, kf0 {})",
        fmt_f64(get("kfopt")),
        fmt_f64(get("kf2")),
        fmt_f64(get("kf1")),
        fmt_f64(get("kf0"))
    );
    if !ordered {
        eprintln!("warning: baseline medians violate the expected ordering");
    }

    write_text(&out.join("benchmark.csv"), &csv)?;
    write_resolved_config(cfg, out)?;
    println!(
        "benchmark medians: kfopt {}, kf2 {}, kf1 {}, kf0 {}",
        fmt_f64(get("kfopt")),
        fmt_f64(get("kf2")),
        fmt_f64(get("kf1")),
        fmt_f64(get("kf0"))
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-traj
// ---------------------------------------------------------------------------

/// Direction of model-driven generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GenDirection {
    /// Anti-causal chain: two layer passes per frame.
    Reverse,
    /// Causal per-frame Gibbs sampling: `2 * gibbs` passes per frame.
    Forward,
}

/// Generate observation trajectories from a trained model and report the
/// exact number of layer passes spent.
pub fn cmd_gen_traj(
    checkpoint: &Path,
    out: &Path,
    direction: GenDirection,
    steps: usize,
    gibbs: usize,
    seed: u64,
) -> Result<()> {
    ensure_out_dir(out)?;
    if steps == 0 {
        bail!("--steps must be at least 1");
    }
    let params = read_checkpoint(checkpoint)?;
    let mut rng = stream(seed, &[TAG_GEN_TRAJ]);

    let (frames, passes): (Vec<_>, PassCounts) = match direction {
        GenDirection::Reverse => {
            // Seed the chain with a fair-coin hidden state.
            let half = ndarray::Array1::from_elem(params.n_hid(), 0.5);
            let seed_hidden = params.hid_spec.sample(&half.view(), &mut rng)?;
            generate_reverse(
                &params,
                steps,
                &seed_hidden.view(),
                StatSource::Means,
                &mut rng,
            )?
        }
        GenDirection::Forward => generate_forward_gibbs(&params, steps, gibbs, &mut rng)?,
    };

    let mut traj = Array2::zeros((steps, params.n_obs()));
    for (t, frame) in frames.iter().enumerate() {
        traj.row_mut(t).assign(frame);
    }

    let direction_name = match direction {
        GenDirection::Reverse => "reverse",
        GenDirection::Forward => "forward",
    };
    let families: Vec<UnitFamily> = params.obs_spec.blocks().iter().map(|b| b.family).collect();
    let uniform_family = match families.as_slice() {
        [] => bail!("checkpoint has no observation units"),
        [first, rest @ ..] if rest.iter().all(|f| f == first) => *first,
        _ => bail!("cannot dump frames for a mixed-family observation layer"),
    };
    let dump_path: PathBuf = match uniform_family {
        UnitFamily::Poisson => {
            let meta = LdsMeta {
                seed,
                n_trajectories: 1,
                traj_length: steps,
                config_json: format!(
                    "{{\"source\":\"model\",\"direction\":\"{direction_name}\",\"gibbs\":{gibbs}}}"
                ),
            };
            let path = out.join("generated-counts.csv");
            write_lds_counts(&path, &meta, std::slice::from_ref(&traj))?;
            path
        }
        UnitFamily::Bernoulli => {
            let px = params.n_obs();
            let frame_size = (px as f64).sqrt().round() as usize;
            if frame_size * frame_size != px {
                bail!("cannot dump frames: {px} observation units is not a square frame");
            }
            let meta = BounceMeta {
                seed,
                n_trajectories: 1,
                traj_length: steps,
                frame_size,
                config_json: format!(
                    "{{\"source\":\"model\",\"direction\":\"{direction_name}\",\"gibbs\":{gibbs}}}"
                ),
            };
            let path = out.join("generated-frames.csv");
            write_bounce_frames(&path, &meta, std::slice::from_ref(&traj))?;
            path
        }
    };

    let total = passes.up + passes.down;
    let passes_csv = format!(
        "direction,steps,up_passes,down_passes,total\n{direction_name},{steps},{},{},{total}\n",
        passes.up, passes.down
    );
    write_text(&out.join("passes.csv"), &passes_csv)?;
    println!(
        "generated {steps} frames ({direction_name}); {} up + {} down = {total} layer passes; dump at {}",
        passes.up,
        passes.down,
        dump_path.display()
    );
    Ok(())
}
