//! Training loops: iterative world-model / policy co-training on the
//! surrogate, command-following training, the online fine-tuning loop
//! (collect, refit dynamics, update policy through the refreshed model), and
//! its off-policy variant that reuses stored data without new interaction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, ParamStore, Tape};
use crate::envsim::{self, observe, Action, PhysicalParams, ReferenceClip, RobotState};
use crate::error::{Error, Result};
use crate::pathcmd::{metrics, Path, PursuitConfig, PursuitTracker, TrackSample};
use crate::replay::{RefCursor, ReplayBuffer, StepRecord, Trajectory};
use crate::vaepolicy::{
    anchor_clip_frames, cf_policy_loss_tape, draw_step_noise, mt_policy_loss_tape, sample_latent,
    window_features, CfBatchItem, CfTrainables, Command, MtBatchItem, MtTrainables, PolicyConfig,
    PolicyNets,
};
use crate::worldmodel::{train_world_model, NormStats, WorldModel};

/// Training phase; determines which parameters the policy updates touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    MtScratch,
    CfScratch,
    Finetune,
    Offpolicy,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Phase::MtScratch => "mt-scratch",
            Phase::CfScratch => "cf-scratch",
            Phase::Finetune => "finetune",
            Phase::Offpolicy => "offpolicy",
        };
        f.write_str(s)
    }
}

/// Loop hyperparameters (Algorithm-style: iterations N, per-agent samples,
/// update counts, batch size, rollout horizon, learning rates).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub iterations: usize,
    /// Environment steps collected per agent per iteration.
    pub samples_per_iter: usize,
    pub agents: usize,
    pub wm_updates: usize,
    pub policy_updates: usize,
    pub batch: usize,
    /// Unroll length for both the prediction loss and the policy losses.
    pub horizon: usize,
    pub lr_wm: f64,
    pub lr_policy: f64,
    pub seed: u64,
    pub buffer_capacity: usize,
    /// Collection episode length for the scratch phases.
    pub episode_len: usize,
    /// Weight of the decoder-drift regularizer during fine-tuning; 0 is the
    /// ablation setting (drift still measured, never optimized).
    pub reg_weight: f64,
}

impl TrainConfig {
    pub fn mt_scratch_defaults(seed: u64) -> Self {
        TrainConfig {
            phase: Phase::MtScratch,
            iterations: 20,
            samples_per_iter: 1500,
            agents: 2,
            wm_updates: 200,
            policy_updates: 200,
            batch: 64,
            horizon: 8,
            lr_wm: 3e-4,
            lr_policy: 2e-4,
            seed,
            buffer_capacity: 200_000,
            episode_len: 200,
            reg_weight: 0.1,
        }
    }

    pub fn cf_scratch_defaults(seed: u64) -> Self {
        TrainConfig { phase: Phase::CfScratch, ..Self::mt_scratch_defaults(seed) }
    }

    pub fn finetune_defaults(seed: u64) -> Self {
        TrainConfig {
            phase: Phase::Finetune,
            iterations: 4,
            samples_per_iter: 1500,
            agents: 1,
            policy_updates: 100,
            ..Self::mt_scratch_defaults(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("samples_per_iter", self.samples_per_iter),
            ("agents", self.agents),
            ("batch", self.batch),
            ("horizon", self.horizon),
            ("buffer_capacity", self.buffer_capacity),
            ("episode_len", self.episode_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if !(self.lr_wm > 0.0) || !(self.lr_policy > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if self.reg_weight < 0.0 {
            return Err(Error::InvalidArgument("reg_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything the training loops mutate: the dynamics model, the policy
/// networks, their shared parameter store, and the (once-fitted, then
/// frozen) normalization statistics.
#[derive(Debug, Clone)]
pub struct Learner {
    pub wm: WorldModel,
    pub nets: PolicyNets,
    pub store: ParamStore,
    pub norm: NormStats,
    pub norm_fitted: bool,
}

impl Learner {
    pub fn new(policy_cfg: PolicyConfig, wm_hidden: &[usize], seed: u64) -> Self {
        let wm = WorldModel::new(policy_cfg.num_joints, wm_hidden);
        let nets = PolicyNets::new(policy_cfg.clone());
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        wm.init_params(&mut store, &mut rng);
        nets.init_params(&mut store, &mut rng);
        Learner {
            wm,
            nets,
            store,
            norm: NormStats::identity(policy_cfg.num_joints),
            norm_fitted: false,
        }
    }

    pub fn from_parts(
        wm: WorldModel,
        nets: PolicyNets,
        store: ParamStore,
        norm: NormStats,
        norm_fitted: bool,
    ) -> Self {
        Learner { wm, nets, store, norm, norm_fitted }
    }

    pub fn normalization_snapshot(&self) -> NormStats {
        self.norm.clone()
    }

    pub fn num_joints(&self) -> usize {
        self.nets.cfg.num_joints
    }

    /// Action from the tracking posterior; samples the latent when `rng` is
    /// given, otherwise uses the mean.
    pub fn act_mt(
        &self,
        state: &RobotState,
        frames: &[RobotState],
        t: usize,
        rng: Option<&mut ChaCha12Rng>,
    ) -> Result<Action> {
        let obs = observe(state);
        let window = window_features(&self.nets.cfg, &self.norm, state, frames, t)?;
        let dist = self.nets.posterior_mt_plain(&self.store, &self.norm, &obs, &window)?;
        let z = match rng {
            Some(r) => sample_latent(&dist, r),
            None => dist.mean.clone(),
        };
        self.nets.decode_plain(&self.store, &self.norm, &obs, &z)
    }

    /// Action from the command posterior.
    pub fn act_cf(
        &self,
        state: &RobotState,
        command: Command,
        rng: Option<&mut ChaCha12Rng>,
    ) -> Result<Action> {
        let obs = observe(state);
        let dist = self.nets.posterior_cf_plain(&self.store, &self.norm, &obs, command)?;
        let z = match rng {
            Some(r) => sample_latent(&dist, r),
            None => dist.mean.clone(),
        };
        self.nets.decode_plain(&self.store, &self.norm, &obs, &z)
    }
}

/// One row of the per-iteration training log. NaN marks fields that do not
/// apply to the phase (they serialize as empty CSV cells).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub samples_total: usize,
    pub loss_wm: f64,
    pub loss_policy: f64,
    pub loss_reg: f64,
    pub e_v: f64,
    pub e_w: f64,
    /// Tracking-reward analog `1 - mean per-step tracking loss` (MT only).
    pub reward: f64,
}

impl IterationLog {
    fn blank(iteration: usize, samples_total: usize) -> Self {
        IterationLog {
            iteration,
            samples_total,
            loss_wm: f64::NAN,
            loss_policy: f64::NAN,
            loss_reg: f64::NAN,
            e_v: f64::NAN,
            e_w: f64::NAN,
            reward: f64::NAN,
        }
    }
}

/// Outcome of a training phase. On divergence the learner is rolled back to
/// the last finite iteration and `diverged_at` records where it happened.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub logs: Vec<IterationLog>,
    pub samples_total: usize,
    pub diverged_at: Option<usize>,
}

fn stream(seed: u64, salt: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

// ---- collection -----------------------------------------------------------

/// Collect one motion-tracking iteration: per agent, episodes that start on
/// a clip frame and either replay the clip's own actions with exploration
/// noise (`bootstrap`) or run the current tracking policy with sampled
/// latents.
#[allow(clippy::too_many_arguments)]
fn collect_mt(
    learner: &Learner,
    cfg: &TrainConfig,
    params: &PhysicalParams,
    clips: &[ReferenceClip],
    bootstrap: bool,
    iteration: usize,
    buffer: &mut ReplayBuffer,
) -> Result<usize> {
    let margin = cfg.horizon + learner.nets.cfg.window + 2;
    let mut collected = 0;
    for agent in 0..cfg.agents {
        let mut rng = stream(cfg.seed, 1000 + iteration as u64 * 131 + agent as u64);
        let mut remaining = cfg.samples_per_iter;
        while remaining > 0 {
            let len = cfg.episode_len.min(remaining);
            let clip_idx = rng.random_range(0..clips.len());
            let clip = &clips[clip_idx];
            if clip.len() < len + margin + 1 {
                return Err(Error::InsufficientData {
                    context: format!("clip {clip_idx} too short for episodes"),
                    needed: len + margin + 1,
                    available: clip.len(),
                });
            }
            let start_idx = rng.random_range(0..clip.len() - len - margin);
            let mut state = clip.frames[start_idx].clone();
            let mut steps = Vec::with_capacity(len);
            for k in 0..len {
                let frame_idx = start_idx + k;
                let action = if bootstrap {
                    let mut a = clip.frames[frame_idx + 1].prev_action.clone();
                    for v in &mut a {
                        *v += rng.random_range(-0.1..0.1);
                    }
                    Action { target_joint_pos: a }
                } else {
                    learner.act_mt(&state, &clip.frames, frame_idx, Some(&mut rng))?
                };
                let next = envsim::step(&state, &action, params)?;
                steps.push(StepRecord {
                    state,
                    action: action.clamped(),
                    command: None,
                    reference: Some(RefCursor { clip: clip_idx, frame: frame_idx }),
                });
                state = next;
            }
            collected += steps.len();
            remaining -= steps.len();
            buffer.push(Trajectory { steps, final_state: state });
        }
    }
    Ok(collected)
}

/// Collect one command-following iteration: episodes from rest with commands
/// held for 2-4 s and resampled uniformly from the training ranges.
fn collect_cf(
    learner: &Learner,
    cfg: &TrainConfig,
    params: &PhysicalParams,
    iteration: usize,
    buffer: &mut ReplayBuffer,
) -> Result<usize> {
    let mut collected = 0;
    for agent in 0..cfg.agents {
        let mut rng = stream(cfg.seed, 2000 + iteration as u64 * 131 + agent as u64);
        let mut remaining = cfg.samples_per_iter;
        while remaining > 0 {
            let len = cfg.episode_len.min(remaining);
            let mut state = RobotState::zero(learner.num_joints());
            let mut steps = Vec::with_capacity(len);
            let mut command = random_command(&mut rng);
            let mut hold = rng.random_range(100..=200);
            for _ in 0..len {
                if hold == 0 {
                    command = random_command(&mut rng);
                    hold = rng.random_range(100..=200);
                }
                hold -= 1;
                let action = learner.act_cf(&state, command, Some(&mut rng))?;
                let next = envsim::step(&state, &action, params)?;
                steps.push(StepRecord {
                    state,
                    action: action.clamped(),
                    command: Some(command),
                    reference: None,
                });
                state = next;
            }
            collected += steps.len();
            remaining -= steps.len();
            buffer.push(Trajectory { steps, final_state: state });
        }
    }
    Ok(collected)
}

fn random_command(rng: &mut impl Rng) -> Command {
    Command { linear: rng.random_range(0.0..=1.5), angular: rng.random_range(-1.5..=1.5) }
}

/// Pursuit-driven collection along a path (the fine-tune deployment):
/// `samples` steps from the path start with latent means.
fn collect_pursuit(
    learner: &Learner,
    params: &PhysicalParams,
    path: &Path,
    pursuit: &PursuitConfig,
    samples: usize,
    buffer: &mut ReplayBuffer,
) -> Result<usize> {
    let mut state = path_start_state(learner.num_joints(), path);
    let mut tracker = PursuitTracker::new();
    let mut steps = Vec::with_capacity(samples);
    for _ in 0..samples {
        let out = tracker.command((state.position[0], state.position[1], state.heading), path, pursuit);
        if out.finished {
            break;
        }
        let action = learner.act_cf(&state, out.command, None)?;
        let next = envsim::step(&state, &action, params)?;
        steps.push(StepRecord {
            state,
            action: action.clamped(),
            command: Some(out.command),
            reference: None,
        });
        state = next;
    }
    let n = steps.len();
    buffer.push(Trajectory { steps, final_state: state });
    Ok(n)
}

/// Rest state posed at the path start, facing along the path.
pub fn path_start_state(num_joints: usize, path: &Path) -> RobotState {
    let mut s = RobotState::zero(num_joints);
    let p = path.point_at(0.0);
    s.position = p;
    s.heading = path.tangent_at(0.0);
    s
}

// ---- policy updates ---------------------------------------------------------

fn mt_policy_update(
    learner: &mut Learner,
    cfg: &TrainConfig,
    clips: &[ReferenceClip],
    buffer: &ReplayBuffer,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, f64)> {
    let need = cfg.horizon + learner.nets.cfg.window;
    let adam = AdamConfig::with_lr(cfg.lr_policy);
    let mut track_sum = 0.0;
    let mut kl_sum = 0.0;
    for _ in 0..cfg.policy_updates {
        let mut items = Vec::with_capacity(cfg.batch);
        let mut guard = 0;
        while items.len() < cfg.batch {
            guard += 1;
            if guard > cfg.batch * 200 {
                return Err(Error::InsufficientData {
                    context: "motion-tracking batch with reference room".into(),
                    needed: cfg.batch,
                    available: items.len(),
                });
            }
            let (traj, idx) = buffer.sample_step(0, rng)?;
            let step = &traj.steps[idx];
            let Some(r) = step.reference else { continue };
            let clip = &clips[r.clip];
            if r.frame + need >= clip.len() {
                continue;
            }
            let anchored = anchor_clip_frames(clip, r.frame, &step.state, need)?;
            items.push(MtBatchItem { start: step.state.clone(), anchored });
        }
        let noise =
            draw_step_noise(cfg.batch, learner.nets.cfg.z_dim, learner.nets.cfg.sigma, cfg.horizon, rng);
        let mut tape = Tape::new();
        let (loss, parts) = mt_policy_loss_tape(
            &mut tape,
            &learner.store,
            &learner.wm,
            &learner.nets,
            &learner.norm,
            &items,
            cfg.horizon,
            &noise,
            MtTrainables::scratch(),
        )?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::NonFinite("motion-tracking loss".into()));
        }
        tape.backward(loss)?;
        let grads = tape.param_grads();
        adam_step(&mut learner.store, &grads, adam)?;
        track_sum += parts.main_per_step;
        kl_sum += parts.aux_per_step;
    }
    let n = cfg.policy_updates.max(1) as f64;
    Ok((track_sum / n, kl_sum / n))
}

fn cf_policy_update(
    learner: &mut Learner,
    cfg: &TrainConfig,
    buffer: &ReplayBuffer,
    reg_weight: f64,
    train: CfTrainables,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, f64)> {
    let adam = AdamConfig::with_lr(cfg.lr_policy);
    let mut cf_sum = 0.0;
    let mut reg_sum = 0.0;
    for _ in 0..cfg.policy_updates {
        let mut items = Vec::with_capacity(cfg.batch);
        let mut guard = 0;
        while items.len() < cfg.batch {
            guard += 1;
            if guard > cfg.batch * 200 {
                return Err(Error::InsufficientData {
                    context: "command batch".into(),
                    needed: cfg.batch,
                    available: items.len(),
                });
            }
            let (traj, idx) = buffer.sample_step(0, rng)?;
            let step = &traj.steps[idx];
            let Some(command) = step.command else { continue };
            items.push(CfBatchItem { start: step.state.clone(), command });
        }
        let noise =
            draw_step_noise(cfg.batch, learner.nets.cfg.z_dim, learner.nets.cfg.sigma, cfg.horizon, rng);
        let mut tape = Tape::new();
        let (loss, parts) = cf_policy_loss_tape(
            &mut tape,
            &learner.store,
            &learner.wm,
            &learner.nets,
            &learner.norm,
            &items,
            cfg.horizon,
            &noise,
            reg_weight,
            train,
        )?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::NonFinite("command-following loss".into()));
        }
        tape.backward(loss)?;
        let grads = tape.param_grads();
        adam_step(&mut learner.store, &grads, adam)?;
        cf_sum += parts.main_per_step;
        reg_sum += parts.aux_per_step;
    }
    let n = cfg.policy_updates.max(1) as f64;
    Ok((cf_sum / n, reg_sum / n))
}

// ---- evaluation ---------------------------------------------------------------

/// Command-following evaluation from rest: a deterministic held-out command
/// schedule, latent means, mean absolute twist errors.
pub fn eval_command_following(
    learner: &Learner,
    params: &PhysicalParams,
    seed: u64,
    steps: usize,
) -> Result<(f64, f64)> {
    let mut rng = stream(seed, 7777);
    let mut state = RobotState::zero(learner.num_joints());
    let mut command = random_command(&mut rng);
    let mut e_v = 0.0;
    let mut e_w = 0.0;
    for k in 0..steps {
        if k > 0 && k % 150 == 0 {
            command = random_command(&mut rng);
        }
        let action = learner.act_cf(&state, command, None)?;
        state = envsim::step(&state, &action, params)?;
        e_v += (command.linear - state.body_velocity[0]).abs();
        e_w += (command.angular - state.yaw_rate).abs();
    }
    Ok((e_v / steps as f64, e_w / steps as f64))
}

/// One pursuit-driven evaluation rollout: states, track samples, and the
/// command log, using latent means throughout.
pub fn eval_on_path(
    learner: &Learner,
    params: &PhysicalParams,
    path: &Path,
    pursuit: &PursuitConfig,
    steps: usize,
) -> Result<(Vec<RobotState>, Vec<TrackSample>, Vec<Command>)> {
    let mut state = path_start_state(learner.num_joints(), path);
    let mut tracker = PursuitTracker::new();
    let mut states = vec![state.clone()];
    let mut samples = Vec::with_capacity(steps);
    let mut commands = Vec::with_capacity(steps);
    for _ in 0..steps {
        let out =
            tracker.command((state.position[0], state.position[1], state.heading), path, pursuit);
        if out.finished {
            break;
        }
        let action = learner.act_cf(&state, out.command, None)?;
        state = envsim::step(&state, &action, params)?;
        states.push(state.clone());
        samples.push(TrackSample {
            position: state.position,
            forward_velocity: state.body_velocity[0],
            yaw_rate: state.yaw_rate,
        });
        commands.push(out.command);
    }
    Ok((states, samples, commands))
}

/// Metrics of a pursuit evaluation (e_v, e_omega, e_p).
pub fn eval_path_metrics(
    learner: &Learner,
    params: &PhysicalParams,
    path: &Path,
    pursuit: &PursuitConfig,
    steps: usize,
) -> Result<(f64, f64, f64)> {
    let (_, samples, commands) = eval_on_path(learner, params, path, pursuit, steps)?;
    metrics(&samples, &commands, path, pursuit.speed)
}

// ---- phases -------------------------------------------------------------------

/// Iterative co-training of the world model and the tracking policy:
/// collect with the current policy (scripted-gait bootstrap on the first
/// iteration), refit the dynamics, update the policy through it.
pub fn co_train_mt(
    learner: &mut Learner,
    cfg: &TrainConfig,
    params: &PhysicalParams,
    clips: &[ReferenceClip],
    mut on_iter: impl FnMut(usize, &Learner, &IterationLog) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::InvalidArgument("co_train_mt needs at least one clip".into()));
    }
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut logs = Vec::new();
    let mut samples_total = 0;
    let mut wm_rng = stream(cfg.seed, 11);
    let mut pi_rng = stream(cfg.seed, 12);

    for iter in 0..cfg.iterations {
        let snapshot = learner.store.clone();
        let result: Result<IterationLog> = (|| {
            let collected =
                collect_mt(learner, cfg, params, clips, iter == 0, iter, &mut buffer)?;
            samples_total += collected;
            if !learner.norm_fitted {
                learner.norm = NormStats::fit(&buffer, learner.num_joints())?;
                learner.norm_fitted = true;
            }
            let wm_report = train_world_model(
                &learner.wm,
                &mut learner.store,
                &learner.norm,
                &buffer,
                cfg.wm_updates,
                cfg.batch,
                cfg.horizon,
                cfg.lr_wm,
                &mut wm_rng,
            )?;
            let (track, _kl) = mt_policy_update(learner, cfg, clips, &buffer, &mut pi_rng)?;
            let mut log = IterationLog::blank(iter, samples_total);
            log.loss_wm = wm_report.final_loss;
            log.loss_policy = track;
            log.reward = 1.0 - track;
            Ok(log)
        })();
        match result {
            Ok(log) => {
                on_iter(iter, learner, &log)?;
                logs.push(log);
            }
            Err(Error::NonFinite(_)) => {
                learner.store = snapshot;
                return Ok(TrainReport { logs, samples_total, diverged_at: Some(iter) });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainReport { logs, samples_total, diverged_at: None })
}

/// Command-following training on top of a tracking checkpoint: only the
/// command encoder updates; the world model keeps refreshing on the newly
/// visited states.
pub fn train_cf(
    learner: &mut Learner,
    cfg: &TrainConfig,
    params: &PhysicalParams,
    mut on_iter: impl FnMut(usize, &Learner, &IterationLog) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if !learner.norm_fitted {
        return Err(Error::InvalidArgument("train_cf requires a tracking checkpoint".into()));
    }
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut logs = Vec::new();
    let mut samples_total = 0;
    let mut wm_rng = stream(cfg.seed, 21);
    let mut pi_rng = stream(cfg.seed, 22);

    for iter in 0..cfg.iterations {
        let snapshot = learner.store.clone();
        let result: Result<IterationLog> = (|| {
            samples_total += collect_cf(learner, cfg, params, iter, &mut buffer)?;
            let wm_report = train_world_model(
                &learner.wm,
                &mut learner.store,
                &learner.norm,
                &buffer,
                cfg.wm_updates,
                cfg.batch,
                cfg.horizon,
                cfg.lr_wm,
                &mut wm_rng,
            )?;
            let (cf, _) = cf_policy_update(
                learner,
                cfg,
                &buffer,
                0.0,
                CfTrainables::scratch(),
                &mut pi_rng,
            )?;
            let (e_v, e_w) = eval_command_following(learner, params, cfg.seed, 750)?;
            let mut log = IterationLog::blank(iter, samples_total);
            log.loss_wm = wm_report.final_loss;
            log.loss_policy = cf;
            log.e_v = e_v;
            log.e_w = e_w;
            Ok(log)
        })();
        match result {
            Ok(log) => {
                on_iter(iter, learner, &log)?;
                logs.push(log);
            }
            Err(Error::NonFinite(_)) => {
                learner.store = snapshot;
                return Ok(TrainReport { logs, samples_total, diverged_at: Some(iter) });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainReport { logs, samples_total, diverged_at: None })
}

/// Online fine-tuning against (perturbed) dynamics along a reference path:
/// per iteration, deploy the policy to collect `samples_per_iter` steps,
/// refit the world model on the buffer, then update the command encoder and
/// motor decoder through it with the decoder-drift regularizer. Iteration 0
/// in the log is the unadapted policy's evaluation.
pub fn fine_tune(
    learner: &mut Learner,
    cfg: &TrainConfig,
    params: &PhysicalParams,
    path: &Path,
    pursuit: &PursuitConfig,
    mut on_iter: impl FnMut(usize, &Learner, &IterationLog) -> Result<()>,
) -> Result<(TrainReport, ReplayBuffer)> {
    cfg.validate()?;
    if !learner.norm_fitted {
        return Err(Error::InvalidArgument("fine_tune requires a command checkpoint".into()));
    }
    learner.nets.snapshot_decoder(&mut learner.store);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut logs = Vec::new();
    let mut samples_total = 0;
    let mut wm_rng = stream(cfg.seed, 31);
    let mut pi_rng = stream(cfg.seed, 32);

    let eval_steps = 1500;
    let (e_v, e_w, _) = eval_path_metrics(learner, params, path, pursuit, eval_steps)?;
    let mut first = IterationLog::blank(0, 0);
    first.e_v = e_v;
    first.e_w = e_w;
    logs.push(first);

    for iter in 0..cfg.iterations {
        let snapshot = learner.store.clone();
        let result: Result<IterationLog> = (|| {
            for _ in 0..cfg.agents {
                samples_total +=
                    collect_pursuit(learner, params, path, pursuit, cfg.samples_per_iter, &mut buffer)?;
            }
            let wm_report = train_world_model(
                &learner.wm,
                &mut learner.store,
                &learner.norm,
                &buffer,
                cfg.wm_updates,
                cfg.batch,
                cfg.horizon,
                cfg.lr_wm,
                &mut wm_rng,
            )?;
            let (cf, reg) = cf_policy_update(
                learner,
                cfg,
                &buffer,
                cfg.reg_weight,
                CfTrainables::finetune(),
                &mut pi_rng,
            )?;
            let (e_v, e_w, _) = eval_path_metrics(learner, params, path, pursuit, eval_steps)?;
            let mut log = IterationLog::blank(iter + 1, samples_total);
            log.loss_wm = wm_report.final_loss;
            log.loss_policy = cf;
            log.loss_reg = reg;
            log.e_v = e_v;
            log.e_w = e_w;
            Ok(log)
        })();
        match result {
            Ok(log) => {
                on_iter(iter + 1, learner, &log)?;
                logs.push(log);
            }
            Err(Error::NonFinite(_)) => {
                learner.store = snapshot;
                return Ok((
                    TrainReport { logs, samples_total, diverged_at: Some(iter) },
                    buffer,
                ));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((TrainReport { logs, samples_total, diverged_at: None }, buffer))
}

/// Off-policy variant: no environment interaction. The world model fits the
/// stored data once, then the policy updates run against it.
pub fn off_policy_finetune(
    learner: &mut Learner,
    cfg: &TrainConfig,
    data: &ReplayBuffer,
    mut on_iter: impl FnMut(usize, &Learner, &IterationLog) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData {
            context: "off-policy fine-tune buffers".into(),
            needed: 1,
            available: 0,
        });
    }
    if !learner.norm_fitted {
        return Err(Error::InvalidArgument(
            "off_policy_finetune requires a command checkpoint".into(),
        ));
    }
    learner.nets.snapshot_decoder(&mut learner.store);
    let mut logs = Vec::new();
    let mut wm_rng = stream(cfg.seed, 41);
    let mut pi_rng = stream(cfg.seed, 42);

    let wm_report = train_world_model(
        &learner.wm,
        &mut learner.store,
        &learner.norm,
        data,
        cfg.wm_updates,
        cfg.batch,
        cfg.horizon,
        cfg.lr_wm,
        &mut wm_rng,
    )?;

    for iter in 0..cfg.iterations {
        let snapshot = learner.store.clone();
        match cf_policy_update(learner, cfg, data, cfg.reg_weight, CfTrainables::finetune(), &mut pi_rng) {
            Ok((cf, reg)) => {
                let mut log = IterationLog::blank(iter, 0);
                log.loss_wm = wm_report.final_loss;
                log.loss_policy = cf;
                log.loss_reg = reg;
                on_iter(iter, learner, &log)?;
                logs.push(log);
            }
            Err(Error::NonFinite(_)) => {
                learner.store = snapshot;
                return Ok(TrainReport { logs, samples_total: 0, diverged_at: Some(iter) });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainReport { logs, samples_total: 0, diverged_at: None })
}

/// Scripted-gait clip library spanning the command ranges.
pub fn default_clip_library(
    params: &PhysicalParams,
    num_joints: usize,
    duration: f64,
) -> Result<Vec<ReferenceClip>> {
    let mut clips = Vec::new();
    for speed in [0.0, 0.3, 0.6, 0.9, 1.2, 1.5] {
        for turn in [-1.2, -0.6, 0.0, 0.6, 1.2] {
            clips.push(envsim::scripted_gait_reference(speed, turn, duration, params, num_joints)?);
        }
    }
    Ok(clips)
}
