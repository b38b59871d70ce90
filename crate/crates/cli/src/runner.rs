//! Command implementations: training phases with CSV/checkpoint emission,
//! path evaluation, the gradient-check report, and the named repro bundles.

use std::path::{Path as FsPath, PathBuf};

use anyhow::{bail, Context, Result};

use wmpolicy::checkpoint::Checkpoint;
use wmpolicy::diagnostics;
use wmpolicy::envsim::{scripted_gait_reference, PhysicalParams};
use wmpolicy::pathcmd::{make_path, metrics, PathKind};
use wmpolicy::replay::{buffer_from_json, buffer_to_json, ReplayBuffer};
use wmpolicy::trainer::{
    self, co_train_mt, eval_on_path, fine_tune, off_policy_finetune, train_cf, IterationLog,
    Learner, Phase, TrainReport,
};
use wmpolicy::envsim::DT;

use crate::config::RunConfig;

fn cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub fn write_training_log(path: &FsPath, logs: &[IterationLog]) -> Result<()> {
    let mut out = String::from(
        "iteration,samples_total,loss_wm,loss_policy,loss_reg,e_v,e_w,reward\n",
    );
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            l.iteration,
            l.samples_total,
            cell(l.loss_wm),
            cell(l.loss_policy),
            cell(l.loss_reg),
            cell(l.e_v),
            cell(l.e_w),
            cell(l.reward),
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_learner(path: &FsPath) -> Result<Learner> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ck.into_learner()?)
}

fn save_checkpoint(
    learner: &Learner,
    phase: Phase,
    iteration: usize,
    seed: u64,
    path: &FsPath,
) -> Result<()> {
    Checkpoint::from_learner(learner, &phase.to_string(), iteration, seed).save(path)?;
    Ok(())
}

fn checkpoint_hook<'a>(
    out_dir: &'a FsPath,
    every: usize,
    phase: Phase,
    seed: u64,
) -> impl FnMut(usize, &Learner, &IterationLog) -> wmpolicy::Result<()> + 'a {
    move |iter, learner, _log| {
        if every > 0 && iter % every == 0 {
            let path = out_dir.join(format!("checkpoint_iter_{iter:04}.json"));
            Checkpoint::from_learner(learner, &phase.to_string(), iter, seed)
                .save(&path)
                .map_err(|e| wmpolicy::Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}

fn finish_phase(
    out_dir: &FsPath,
    learner: &Learner,
    report: &TrainReport,
    phase: Phase,
    seed: u64,
) -> Result<()> {
    write_training_log(&out_dir.join("training_log.csv"), &report.logs)?;
    save_checkpoint(learner, phase, report.logs.len(), seed, &out_dir.join("checkpoint_final.json"))?;
    if let Some(iter) = report.diverged_at {
        bail!("training diverged at iteration {iter}; last good checkpoint kept");
    }
    Ok(())
}

pub fn run_gen_ref(cfg: &RunConfig, speed: f64, turn: f64, duration: f64, out: &FsPath) -> Result<()> {
    let clip =
        scripted_gait_reference(speed, turn, duration, &cfg.env.params(), cfg.env.joints)?;
    std::fs::write(out, clip.to_json()?)?;
    println!(
        "wrote clip: speed={speed} turn={turn} frames={} dt={DT} -> {}",
        clip.len(),
        out.display()
    );
    Ok(())
}

pub fn run_train_mt(cfg: &RunConfig) -> Result<()> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    cfg.save_resolved(&out_dir)?;
    let params = cfg.env.params();
    let clips = trainer::default_clip_library(&params, cfg.env.joints, cfg.clips.duration)?;
    let mut learner = Learner::new(
        cfg.nets.policy_config(cfg.env.joints),
        &cfg.nets.wm_hidden,
        cfg.seed,
    );
    let mut train = cfg.train.train_config(cfg.seed);
    train.phase = Phase::MtScratch;
    let hook = checkpoint_hook(&out_dir, cfg.train.checkpoint_every, train.phase, cfg.seed);
    let report = co_train_mt(&mut learner, &train, &params, &clips, hook)?;
    finish_phase(&out_dir, &learner, &report, Phase::MtScratch, cfg.seed)?;
    let last = report.logs.last().map(|l| l.reward).unwrap_or(f64::NAN);
    println!(
        "train-mt done: {} iterations, {} samples, final reward {:.4}",
        report.logs.len(),
        report.samples_total,
        last
    );
    Ok(())
}

pub fn run_train_cf(cfg: &RunConfig, checkpoint: &FsPath) -> Result<()> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    cfg.save_resolved(&out_dir)?;
    let params = cfg.env.params();
    let mut learner = load_learner(checkpoint)?;
    let mut train = cfg.train.train_config(cfg.seed);
    train.phase = Phase::CfScratch;
    let hook = checkpoint_hook(&out_dir, cfg.train.checkpoint_every, train.phase, cfg.seed);
    let report = train_cf(&mut learner, &train, &params, hook)?;
    finish_phase(&out_dir, &learner, &report, Phase::CfScratch, cfg.seed)?;
    let last = report.logs.last().map(|l| l.loss_policy).unwrap_or(f64::NAN);
    println!(
        "train-cf done: {} iterations, {} samples, final command loss {:.4}",
        report.logs.len(),
        report.samples_total,
        last
    );
    Ok(())
}

pub fn run_finetune(cfg: &RunConfig, checkpoint: &FsPath) -> Result<()> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    cfg.save_resolved(&out_dir)?;
    let params = cfg.env.params();
    let mut learner = load_learner(checkpoint)?;
    let path = make_path(cfg.path.kind, cfg.path.scale)?;
    let pursuit = cfg.path.pursuit();
    pursuit.validate()?;
    let mut train = cfg.train.train_config(cfg.seed);
    train.phase = Phase::Finetune;
    let hook = checkpoint_hook(&out_dir, cfg.train.checkpoint_every.max(1), train.phase, cfg.seed);
    let (report, buffer) = fine_tune(&mut learner, &train, &params, &path, &pursuit, hook)?;
    std::fs::write(out_dir.join("buffers.json"), buffer_to_json(&buffer)?)?;
    finish_phase(&out_dir, &learner, &report, Phase::Finetune, cfg.seed)?;
    let last = report.logs.last().map(|l| l.loss_policy).unwrap_or(f64::NAN);
    println!(
        "finetune done: {} iterations, {} samples, final command loss {:.4}",
        report.logs.len().saturating_sub(1),
        report.samples_total,
        last
    );
    Ok(())
}

pub fn run_offpolicy(cfg: &RunConfig, checkpoint: &FsPath, buffers: &[PathBuf]) -> Result<()> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    cfg.save_resolved(&out_dir)?;
    if buffers.is_empty() {
        bail!("offpolicy-finetune needs at least one --buffers file");
    }
    let mut merged = ReplayBuffer::new(cfg.train.buffer_capacity);
    for b in buffers {
        let text =
            std::fs::read_to_string(b).with_context(|| format!("reading {}", b.display()))?;
        let loaded = buffer_from_json(&text, cfg.train.buffer_capacity)?;
        for t in loaded.trajectories() {
            merged.push(t.clone());
        }
    }
    let mut learner = load_learner(checkpoint)?;
    let mut train = cfg.train.train_config(cfg.seed);
    train.phase = Phase::Offpolicy;
    let hook = checkpoint_hook(&out_dir, cfg.train.checkpoint_every, train.phase, cfg.seed);
    let report = off_policy_finetune(&mut learner, &train, &merged, hook)?;
    finish_phase(&out_dir, &learner, &report, Phase::Offpolicy, cfg.seed)?;
    println!(
        "offpolicy-finetune done: {} iterations on {} stored transitions",
        report.logs.len(),
        merged.num_transitions()
    );
    Ok(())
}

pub fn run_eval_path(cfg: &RunConfig, checkpoint: &FsPath) -> Result<()> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    cfg.save_resolved(&out_dir)?;
    let params = cfg.env.params();
    let learner = load_learner(checkpoint)?;
    let path = make_path(cfg.path.kind, cfg.path.scale)?;
    let pursuit = cfg.path.pursuit();
    pursuit.validate()?;
    let steps = 1500;
    let (states, samples, commands) = eval_on_path(&learner, &params, &path, &pursuit, steps)?;
    let (e_v, e_w, e_p) = metrics(&samples, &commands, &path, pursuit.speed)?;

    let mut traj = String::from("t,x,y,heading,vx,vy,yaw_rate,v_cmd,w_cmd\n");
    for (k, c) in commands.iter().enumerate() {
        let s = &states[k + 1];
        traj.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            (k + 1) as f64 * DT,
            s.position[0],
            s.position[1],
            s.heading,
            s.body_velocity[0],
            s.body_velocity[1],
            s.yaw_rate,
            c.linear,
            c.angular,
        ));
    }
    std::fs::write(out_dir.join("trajectory.csv"), traj)?;
    std::fs::write(
        out_dir.join("metrics.csv"),
        format!("e_v,e_w,e_p\n{e_v},{e_w},{e_p}\n"),
    )?;
    println!(
        "eval-path {} @ {:.2} m/s: e_v={:.4} e_w={:.4} e_p={:.4}",
        cfg.path.kind, pursuit.speed, e_v, e_w, e_p
    );
    Ok(())
}

pub fn run_gradcheck(seed: u64) -> Result<()> {
    let mut all_ok = true;
    let mut entries = diagnostics::full_gradient_suite(seed)?;
    entries.push(diagnostics::action_gradient_check(seed)?);
    for e in &entries {
        let status = if e.report.passed() { "pass" } else { "FAIL" };
        println!(
            "{status}  {:<24} max_rel={:.3e} ({} params)",
            e.name,
            e.report.max_rel_err(),
            e.report.entries.len()
        );
        if !e.report.passed() {
            all_ok = false;
            print!("{}", e.report.summary());
        }
    }
    if !all_ok {
        bail!("gradient checks failed");
    }
    println!("gradcheck: all {} checks passed (seed {seed})", entries.len());
    Ok(())
}

/// Evaluate a learner on one path/speed, returning (e_v, e_w, e_p).
fn path_metrics(
    learner: &Learner,
    params: &PhysicalParams,
    kind: PathKind,
    speed: f64,
    lookahead: f64,
) -> Result<(f64, f64, f64)> {
    let path = make_path(kind, 1.0)?;
    let pursuit =
        wmpolicy::pathcmd::PursuitConfig { lookahead, speed, omega_clamp: 1.5 };
    let (_, samples, commands) = eval_on_path(learner, params, &path, &pursuit, 1500)?;
    Ok(metrics(&samples, &commands, &path, speed)?)
}

pub fn run_repro(cfg: &RunConfig, bundle: &str, checkpoint: Option<&FsPath>) -> Result<()> {
    match bundle {
        "fig3a" => {
            let mut c = cfg.clone();
            c.out_dir = format!("{}/fig3a", cfg.out_dir);
            c.train.phase = Phase::MtScratch;
            run_train_mt(&c)
        }
        "fig3c-env2" | "fig3c-env3" | "fig3c-env4" => {
            let ck = require_checkpoint(bundle, checkpoint)?;
            let (payload, budget) = match bundle {
                "fig3c-env2" => (3.0, 4),
                "fig3c-env3" => (5.0, 6),
                _ => (7.0, 8),
            };
            let mut c = cfg.clone();
            c.out_dir = format!("{}/{bundle}", cfg.out_dir);
            c.env.mass = 5.74 + payload;
            c.env.control_latency_ms = 6.0;
            c.train.phase = Phase::Finetune;
            c.train.iterations = budget + 2;
            c.train.samples_per_iter = 1500;
            c.train.agents = 1;
            c.train.policy_updates = c.train.policy_updates.min(100);
            run_finetune(&c, ck)
        }
        "fig3d-analog" | "table2-analog" => {
            let ck = require_checkpoint(bundle, checkpoint)?;
            let out_dir = PathBuf::from(&cfg.out_dir).join(bundle);
            std::fs::create_dir_all(&out_dir)?;
            cfg.save_resolved(&out_dir)?;
            let mut table = String::from("speed,iteration,loss_cf,e_v,e_w\n");
            for speed in [0.6, 0.9, 1.2] {
                let mut c = cfg.clone();
                c.out_dir = out_dir.join(format!("speed_{speed}")).display().to_string();
                c.env.mass = 5.74 + 3.0;
                c.env.control_latency_ms = 6.0;
                c.path.speed = speed;
                c.train.phase = Phase::Finetune;
                c.train.iterations = 4;
                c.train.samples_per_iter = 1500;
                c.train.agents = 1;
                c.train.policy_updates = c.train.policy_updates.min(100);
                run_finetune(&c, ck)?;
                let text =
                    std::fs::read_to_string(PathBuf::from(&c.out_dir).join("training_log.csv"))?;
                for line in text.lines().skip(1) {
                    let f: Vec<&str> = line.split(',').collect();
                    table.push_str(&format!("{speed},{},{},{},{}\n", f[0], f[3], f[5], f[6]));
                }
            }
            std::fs::write(out_dir.join("table.csv"), table)?;
            println!("{bundle} done");
            Ok(())
        }
        "table4-analog" => {
            let ck = require_checkpoint(bundle, checkpoint)?;
            let out_dir = PathBuf::from(&cfg.out_dir).join(bundle);
            std::fs::create_dir_all(&out_dir)?;
            cfg.save_resolved(&out_dir)?;
            let params = PhysicalParams::with_payload(3.0);
            let origin = load_learner(ck)?;

            // collect adaptation data at the three seen speeds on the oblong
            let mut merged = ReplayBuffer::new(cfg.train.buffer_capacity);
            for (i, speed) in [0.6, 0.9, 1.2].iter().enumerate() {
                let mut learner = origin.clone();
                let mut train = cfg.train.train_config(cfg.seed.wrapping_add(i as u64));
                train.phase = Phase::Finetune;
                train.iterations = 4;
                train.samples_per_iter = 1500;
                train.agents = 1;
                train.policy_updates = train.policy_updates.min(100);
                let path = make_path(PathKind::Oblong, 1.0)?;
                let pursuit = wmpolicy::pathcmd::PursuitConfig {
                    lookahead: cfg.path.lookahead,
                    speed: *speed,
                    omega_clamp: 1.5,
                };
                let (_, buffer) =
                    fine_tune(&mut learner, &train, &params, &path, &pursuit, |_, _, _| Ok(()))?;
                for t in buffer.trajectories() {
                    merged.push(t.clone());
                }
            }
            std::fs::write(out_dir.join("buffers.json"), buffer_to_json(&merged)?)?;

            // adapt off-policy from the original checkpoint
            let mut adapted = origin.clone();
            let mut train = cfg.train.train_config(cfg.seed);
            train.phase = Phase::Offpolicy;
            train.iterations = 4;
            let report = off_policy_finetune(&mut adapted, &train, &merged, |_, _, _| Ok(()))?;
            write_training_log(&out_dir.join("offpolicy_log.csv"), &report.logs)?;
            save_checkpoint(
                &adapted,
                Phase::Offpolicy,
                report.logs.len(),
                cfg.seed,
                &out_dir.join("checkpoint_final.json"),
            )?;

            // generalization table over unseen speeds and all paths
            let mut table = String::from("path,speed,variant,e_v,e_w,e_p\n");
            for kind in
                [PathKind::Oblong, PathKind::Lemniscate, PathKind::UShape, PathKind::Star]
            {
                for speed in [0.7, 0.8, 1.0] {
                    for (variant, learner) in [("origin", &origin), ("adapted", &adapted)] {
                        let (e_v, e_w, e_p) =
                            path_metrics(learner, &params, kind, speed, cfg.path.lookahead)?;
                        table.push_str(&format!("{kind},{speed},{variant},{e_v},{e_w},{e_p}\n"));
                    }
                }
            }
            std::fs::write(out_dir.join("table4.csv"), table)?;
            println!("table4-analog done");
            Ok(())
        }
        other => bail!("unknown repro bundle `{other}`"),
    }
}

fn require_checkpoint<'a>(bundle: &str, ck: Option<&'a FsPath>) -> Result<&'a FsPath> {
    ck.ok_or_else(|| anyhow::anyhow!("bundle `{bundle}` needs --checkpoint <cf checkpoint>"))
}
