//! Learned differentiable dynamics: a residual MLP predicts a body-frame
//! state delta from (observation, action); the delta is composed onto the
//! current pose. An n-step open-loop prediction loss drives training, and
//! the same multi-step unroll is the substrate policy losses differentiate
//! through.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, wrap_angle, AdamConfig, MlpSpec, ParamStore, Tape, Tensor, Var};
use crate::envsim::{observe, Action, Observation, RobotState};
use crate::error::{Error, Result};
use crate::replay::{ReplayBuffer, Segment};

/// Parameter-name prefix of the world-model MLP.
pub const WM_PREFIX: &str = "wm";

/// Input/target normalization statistics, fitted once from early collected
/// data and kept frozen afterwards (they ride along in checkpoints). Both
/// the world model and the policy networks consume observations scaled by
/// these statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub act_mean: Vec<f64>,
    pub act_std: Vec<f64>,
    pub delta_mean: Vec<f64>,
    pub delta_std: Vec<f64>,
}

impl NormStats {
    pub fn identity(num_joints: usize) -> Self {
        let obs = Observation::dim(num_joints);
        let delta = 6 + 2 * num_joints;
        NormStats {
            obs_mean: vec![0.0; obs],
            obs_std: vec![1.0; obs],
            act_mean: vec![0.0; num_joints],
            act_std: vec![1.0; num_joints],
            delta_mean: vec![0.0; delta],
            delta_std: vec![1.0; delta],
        }
    }

    /// Fit means and standard deviations over every transition in the
    /// buffer. Standard deviations are floored to keep scaling finite on
    /// constant fields.
    pub fn fit(buffer: &ReplayBuffer, num_joints: usize) -> Result<Self> {
        let mut stats = NormStats::identity(num_joints);
        let obs_dim = Observation::dim(num_joints);
        let delta_dim = 6 + 2 * num_joints;
        let mut obs_acc = Accum::new(obs_dim);
        let mut act_acc = Accum::new(num_joints);
        let mut delta_acc = Accum::new(delta_dim);
        for traj in buffer.trajectories() {
            for i in 0..traj.len() {
                let s = traj.state(i);
                let next = traj.state(i + 1);
                obs_acc.add(&observe(s).values);
                act_acc.add(&traj.steps[i].action);
                delta_acc.add(&body_frame_delta(s, next));
            }
        }
        if obs_acc.count == 0 {
            return Err(Error::InsufficientData {
                context: "normalization fit".into(),
                needed: 1,
                available: 0,
            });
        }
        let (m, s) = obs_acc.finish();
        stats.obs_mean = m;
        stats.obs_std = s;
        let (m, s) = act_acc.finish();
        stats.act_mean = m;
        stats.act_std = s;
        let (m, s) = delta_acc.finish();
        stats.delta_mean = m;
        stats.delta_std = s;
        Ok(stats)
    }

    pub fn normalize_obs(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .zip(self.obs_mean.iter().zip(&self.obs_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn normalize_act(&self, act: &[f64]) -> Vec<f64> {
        act.iter()
            .zip(self.act_mean.iter().zip(&self.act_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

struct Accum {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    count: usize,
}

impl Accum {
    fn new(dim: usize) -> Self {
        Accum { sum: vec![0.0; dim], sumsq: vec![0.0; dim], count: 0 }
    }

    fn add(&mut self, v: &[f64]) {
        for (i, x) in v.iter().enumerate() {
            self.sum[i] += x;
            self.sumsq[i] += x * x;
        }
        self.count += 1;
    }

    fn finish(self) -> (Vec<f64>, Vec<f64>) {
        let n = self.count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let std = self
            .sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / n - m * m).max(0.0)).sqrt().max(1e-4))
            .collect();
        (mean, std)
    }
}

/// Ground-truth body-frame delta between consecutive states, in the fixed
/// order (dx_body, dy_body, dheading, dvx, dvy, dyaw, djoint_pos..,
/// djoint_vel..).
pub fn body_frame_delta(s: &RobotState, next: &RobotState) -> Vec<f64> {
    let (sin_h, cos_h) = s.heading.sin_cos();
    let dx = next.position[0] - s.position[0];
    let dy = next.position[1] - s.position[1];
    let mut d = Vec::with_capacity(6 + 2 * s.num_joints());
    d.push(cos_h * dx + sin_h * dy);
    d.push(-sin_h * dx + cos_h * dy);
    d.push(wrap_angle(next.heading - s.heading));
    d.push(next.body_velocity[0] - s.body_velocity[0]);
    d.push(next.body_velocity[1] - s.body_velocity[1]);
    d.push(next.yaw_rate - s.yaw_rate);
    for i in 0..s.num_joints() {
        d.push(next.joint_pos[i] - s.joint_pos[i]);
    }
    for i in 0..s.num_joints() {
        d.push(next.joint_vel[i] - s.joint_vel[i]);
    }
    d
}

/// Batched robot state on a tape, split by field group. Positions and
/// headings are world-frame; everything else is body-frame.
#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    /// `[B, 2]`
    pub pos: Var,
    /// `[B, 1]`
    pub heading: Var,
    /// `[B, 3]` (vx, vy, yaw rate)
    pub twist: Var,
    /// `[B, J]`
    pub joint_pos: Var,
    /// `[B, J]`
    pub joint_vel: Var,
}

/// Load a batch of states onto the tape as constants.
pub fn state_batch(tape: &mut Tape, states: &[&RobotState]) -> StateVars {
    let b = states.len();
    let j = states[0].num_joints();
    let mut pos = Vec::with_capacity(b * 2);
    let mut heading = Vec::with_capacity(b);
    let mut twist = Vec::with_capacity(b * 3);
    let mut jp = Vec::with_capacity(b * j);
    let mut jv = Vec::with_capacity(b * j);
    for s in states {
        pos.extend_from_slice(&s.position);
        heading.push(s.heading);
        twist.extend_from_slice(&s.body_velocity);
        twist.push(s.yaw_rate);
        jp.extend_from_slice(&s.joint_pos);
        jv.extend_from_slice(&s.joint_vel);
    }
    StateVars {
        pos: tape.constant(Tensor::matrix(b, 2, pos)),
        heading: tape.constant(Tensor::matrix(b, 1, heading)),
        twist: tape.constant(Tensor::matrix(b, 3, twist)),
        joint_pos: tape.constant(Tensor::matrix(b, j, jp)),
        joint_vel: tape.constant(Tensor::matrix(b, j, jv)),
    }
}

/// Tile a vector into a `[rows, dim]` constant.
pub fn tile_const(tape: &mut Tape, rows: usize, values: &[f64]) -> Var {
    let mut data = Vec::with_capacity(rows * values.len());
    for _ in 0..rows {
        data.extend_from_slice(values);
    }
    tape.constant(Tensor::matrix(rows, values.len(), data))
}

/// Normalize a `[B, D]` tensor column-wise: `(x - mean) / std`.
pub fn normalize_cols(tape: &mut Tape, x: Var, mean: &[f64], std: &[f64]) -> Var {
    let rows = tape.value(x).rows();
    let m = tile_const(tape, rows, mean);
    let inv: Vec<f64> = std.iter().map(|s| 1.0 / s).collect();
    let i = tile_const(tape, rows, &inv);
    let centered = tape.sub(x, m);
    tape.mul(centered, i)
}

/// The residual dynamics network.
#[derive(Debug, Clone)]
pub struct WorldModel {
    pub spec: MlpSpec,
    pub num_joints: usize,
}

impl WorldModel {
    pub fn new(num_joints: usize, hidden: &[usize]) -> Self {
        let obs = Observation::dim(num_joints);
        let delta = 6 + 2 * num_joints;
        let mut sizes = vec![obs + num_joints];
        sizes.extend_from_slice(hidden);
        sizes.push(delta);
        WorldModel { spec: MlpSpec::new(WM_PREFIX, sizes), num_joints }
    }

    /// Zero final layer: the fresh model is the identity dynamics.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.spec.init_params(store, rng);
    }

    pub fn delta_dim(&self) -> usize {
        6 + 2 * self.num_joints
    }

    /// Single-transition prediction without a tape.
    pub fn predict_plain(
        &self,
        store: &ParamStore,
        norm: &NormStats,
        state: &RobotState,
        obs: &Observation,
        action: &Action,
    ) -> Result<RobotState> {
        let mut input = norm.normalize_obs(&obs.values);
        input.extend(norm.normalize_act(&action.target_joint_pos));
        let raw = self.spec.forward_plain(store, &input)?;
        let delta: Vec<f64> = raw
            .iter()
            .zip(norm.delta_mean.iter().zip(&norm.delta_std))
            .map(|(v, (m, s))| v * s + m)
            .collect();
        if !delta.iter().all(|v| v.is_finite()) {
            let field = delta.iter().position(|v| !v.is_finite()).unwrap();
            return Err(Error::NonFinite(format!("predicted state delta field {field}")));
        }
        let j = self.num_joints;
        let (sin_h, cos_h) = state.heading.sin_cos();
        let mut next = state.clone();
        next.position[0] += cos_h * delta[0] - sin_h * delta[1];
        next.position[1] += sin_h * delta[0] + cos_h * delta[1];
        next.heading = wrap_angle(state.heading + delta[2]);
        next.body_velocity[0] += delta[3];
        next.body_velocity[1] += delta[4];
        next.yaw_rate += delta[5];
        for i in 0..j {
            next.joint_pos[i] += delta[6 + i];
            next.joint_vel[i] += delta[6 + j + i];
        }
        next.prev_action = action.clamped();
        Ok(next)
    }

    /// Batched differentiable prediction step. The observation is derived
    /// from the state vars, so gradients flow through multi-step unrolls
    /// into earlier actions and states.
    pub fn predict_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        norm: &NormStats,
        state: &StateVars,
        action: Var,
        trainable: bool,
    ) -> Result<StateVars> {
        let j = self.num_joints;
        let obs_raw = tape.concat_cols(&[state.twist, state.joint_pos, state.joint_vel]);
        let obs_n = normalize_cols(tape, obs_raw, &norm.obs_mean, &norm.obs_std);
        let act_n = normalize_cols(tape, action, &norm.act_mean, &norm.act_std);
        let input = tape.concat_cols(&[obs_n, act_n]);
        let raw = self.spec.forward(tape, store, input, trainable)?;
        let rows = tape.value(raw).rows();
        let std_t = tile_const(tape, rows, &norm.delta_std);
        let mean_t = tile_const(tape, rows, &norm.delta_mean);
        let scaled = tape.mul(raw, std_t);
        let delta = tape.add(scaled, mean_t);

        let d_xy = tape.slice_cols(delta, 0, 2);
        let d_h = tape.slice_cols(delta, 2, 3);
        let d_twist = tape.slice_cols(delta, 3, 6);
        let d_jp = tape.slice_cols(delta, 6, 6 + j);
        let d_jv = tape.slice_cols(delta, 6 + j, 6 + 2 * j);

        let cos_h = tape.cos(state.heading);
        let sin_h = tape.sin(state.heading);
        let dxb = tape.slice_cols(d_xy, 0, 1);
        let dyb = tape.slice_cols(d_xy, 1, 2);
        let cx = tape.mul(cos_h, dxb);
        let sy = tape.mul(sin_h, dyb);
        let dx_w = tape.sub(cx, sy);
        let sx = tape.mul(sin_h, dxb);
        let cy = tape.mul(cos_h, dyb);
        let dy_w = tape.add(sx, cy);
        let d_pos = tape.concat_cols(&[dx_w, dy_w]);

        let pos = tape.add(state.pos, d_pos);
        let h_raw = tape.add(state.heading, d_h);
        let heading = tape.wrap_angle(h_raw);
        let twist = tape.add(state.twist, d_twist);
        let joint_pos = tape.add(state.joint_pos, d_jp);
        let joint_vel = tape.add(state.joint_vel, d_jv);
        Ok(StateVars { pos, heading, twist, joint_pos, joint_vel })
    }

    /// Concatenated wrapped state difference `[B, 6 + 2J]` between a
    /// predicted batch and reference constants.
    fn state_diff(
        &self,
        tape: &mut Tape,
        pred: &StateVars,
        target: &StateVars,
    ) -> Var {
        let d_pos = tape.sub(pred.pos, target.pos);
        let d_h_raw = tape.sub(pred.heading, target.heading);
        let d_h = tape.wrap_angle(d_h_raw);
        let d_twist = tape.sub(pred.twist, target.twist);
        let d_jp = tape.sub(pred.joint_pos, target.joint_pos);
        let d_jv = tape.sub(pred.joint_vel, target.joint_vel);
        tape.concat_cols(&[d_pos, d_h, d_twist, d_jp, d_jv])
    }

    /// Eq.-style n-step open-loop prediction loss over a batch of segments:
    /// the model consumes its own predictions; per step the L2 norm of the
    /// wrapped state difference is averaged over the batch and summed over
    /// steps.
    pub fn prediction_loss_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        norm: &NormStats,
        segments: &[Segment],
        trainable: bool,
    ) -> Result<Var> {
        let n = segments
            .iter()
            .map(Segment::horizon)
            .min()
            .ok_or_else(|| Error::InvalidArgument("prediction loss needs segments".into()))?;
        if n == 0 {
            return Err(Error::InvalidArgument("segments must hold at least one step".into()));
        }
        let b = segments.len();
        let j = self.num_joints;
        let starts: Vec<&RobotState> = segments.iter().map(|s| &s.states[0]).collect();
        let mut current = state_batch(tape, &starts);
        let mut total: Option<Var> = None;
        for t in 0..n {
            let mut act = Vec::with_capacity(b * j);
            for seg in segments {
                act.extend_from_slice(&seg.actions[t].target_joint_pos);
            }
            let action = tape.constant(Tensor::matrix(b, j, act));
            current = self.predict_tape(tape, store, norm, &current, action, trainable)?;
            let targets: Vec<&RobotState> = segments.iter().map(|s| &s.states[t + 1]).collect();
            let target_vars = state_batch(tape, &targets);
            let diff = self.state_diff(tape, &current, &target_vars);
            let norms = tape.row_norm(diff);
            let step_loss = tape.mean_all(norms);
            total = Some(match total {
                None => step_loss,
                Some(acc) => tape.add(acc, step_loss),
            });
        }
        Ok(total.unwrap())
    }

    /// Loss value without gradients.
    pub fn prediction_loss_value(
        &self,
        store: &ParamStore,
        norm: &NormStats,
        segments: &[Segment],
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.prediction_loss_tape(&mut tape, store, norm, segments, false)?;
        Ok(tape.value(loss).item())
    }
}

/// Result of a world-model training phase.
#[derive(Debug, Clone, Copy)]
pub struct WmTrainReport {
    pub updates: usize,
    pub final_loss: f64,
}

/// Run `n_updates` Adam steps on the mean batch n-step loss, sampling
/// segments from the buffer.
#[allow(clippy::too_many_arguments)]
pub fn train_world_model(
    wm: &WorldModel,
    store: &mut ParamStore,
    norm: &NormStats,
    buffer: &ReplayBuffer,
    n_updates: usize,
    batch: usize,
    horizon: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<WmTrainReport> {
    if buffer.num_segment_starts(horizon) < batch {
        return Err(Error::InsufficientData {
            context: format!("world-model training segments of length {horizon}"),
            needed: batch,
            available: buffer.num_segment_starts(horizon),
        });
    }
    let cfg = AdamConfig::with_lr(lr);
    let mut last = f64::NAN;
    for _ in 0..n_updates {
        let segments: Result<Vec<Segment>> =
            (0..batch).map(|_| buffer.sample_segment(horizon, rng)).collect();
        let segments = segments?;
        let mut tape = Tape::new();
        let loss = wm.prediction_loss_tape(&mut tape, store, norm, &segments, true)?;
        last = tape.value(loss).item();
        tape.backward(loss)?;
        let grads = tape.param_grads();
        adam_step(store, &grads, cfg)?;
    }
    Ok(WmTrainReport { updates: n_updates, final_loss: last })
}
