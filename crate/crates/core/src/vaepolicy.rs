//! VAE-style control policy: a state-conditional prior over the latent
//! space, residual motion-tracking and command-following encoders, and a
//! motor decoder. Training losses are evaluated on multi-step world-model
//! rollouts and differentiated end to end.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{wrap_angle, MlpSpec, ParamStore, Tape, Tensor, Var};
use crate::envsim::{Action, Observation, ReferenceClip, RobotState};
use crate::error::{Error, Result};
use crate::worldmodel::{normalize_cols, state_batch, NormStats, StateVars, WorldModel};

/// User twist command: desired forward velocity and yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub linear: f64,
    pub angular: f64,
}

impl Command {
    pub fn zero() -> Self {
        Command { linear: 0.0, angular: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.5).contains(&self.linear) || self.angular.abs() > 1.5 {
            return Err(Error::InvalidArgument(format!(
                "command ({}, {}) outside training ranges",
                self.linear, self.angular
            )));
        }
        Ok(())
    }
}

/// Gaussian over the latent with a fixed isotropic standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub mean: Vec<f64>,
    pub sigma: f64,
}

/// Reparameterized draw: `mean + sigma * eps`, differentiable in the mean.
pub fn sample_latent(dist: &LatentDistribution, rng: &mut impl Rng) -> Vec<f64> {
    dist.mean
        .iter()
        .map(|m| m + dist.sigma * crate::autodiff::gaussian(rng))
        .collect()
}

/// Architecture knobs shared by all policy networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub num_joints: usize,
    pub z_dim: usize,
    /// Future reference frames fed to the tracking encoder.
    pub window: usize,
    /// Fixed latent standard deviation.
    pub sigma: f64,
    pub hidden: Vec<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            num_joints: crate::envsim::DEFAULT_JOINTS,
            z_dim: 16,
            window: 2,
            sigma: 0.3,
            hidden: vec![256, 256],
        }
    }
}

impl PolicyConfig {
    pub fn obs_dim(&self) -> usize {
        Observation::dim(self.num_joints)
    }

    /// Per-frame window feature width: relative displacement (2), relative
    /// heading (1), body twist (3), joint positions and velocities (2J).
    pub fn frame_dim(&self) -> usize {
        6 + 2 * self.num_joints
    }

    pub fn window_dim(&self) -> usize {
        self.window * self.frame_dim()
    }
}

/// The five networks: prior, the two residual encoders, the motor decoder,
/// and the frozen snapshot of the decoder taken at fine-tune entry.
#[derive(Debug, Clone)]
pub struct PolicyNets {
    pub cfg: PolicyConfig,
    pub prior: MlpSpec,
    pub enc_mt: MlpSpec,
    pub enc_cf: MlpSpec,
    pub decoder: MlpSpec,
    pub decoder_ori: MlpSpec,
}

pub const PRIOR_PREFIX: &str = "prior";
pub const ENC_MT_PREFIX: &str = "enc_mt";
pub const ENC_CF_PREFIX: &str = "enc_cf";
pub const DECODER_PREFIX: &str = "dec";
/// Reserved name for the frozen original-decoder snapshot.
pub const DECODER_ORI_PREFIX: &str = "dec_ori";

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut v = vec![input];
    v.extend_from_slice(hidden);
    v.push(output);
    v
}

impl PolicyNets {
    pub fn new(cfg: PolicyConfig) -> Self {
        let obs = cfg.obs_dim();
        let prior = MlpSpec::new(PRIOR_PREFIX, sizes(obs, &cfg.hidden, cfg.z_dim));
        let enc_mt =
            MlpSpec::new(ENC_MT_PREFIX, sizes(obs + cfg.window_dim(), &cfg.hidden, cfg.z_dim));
        let enc_cf = MlpSpec::new(ENC_CF_PREFIX, sizes(obs + 2, &cfg.hidden, cfg.z_dim));
        let decoder =
            MlpSpec::new(DECODER_PREFIX, sizes(obs + cfg.z_dim, &cfg.hidden, cfg.num_joints));
        let decoder_ori =
            MlpSpec::new(DECODER_ORI_PREFIX, sizes(obs + cfg.z_dim, &cfg.hidden, cfg.num_joints));
        PolicyNets { cfg, prior, enc_mt, enc_cf, decoder, decoder_ori }
    }

    /// Initialize all nets except the original-decoder snapshot, which only
    /// exists once fine-tuning snapshots it.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.prior.init_params(store, rng);
        self.enc_mt.init_params(store, rng);
        self.enc_cf.init_params(store, rng);
        self.decoder.init_params(store, rng);
    }

    /// Copy the live decoder into the reserved snapshot slot.
    pub fn snapshot_decoder(&self, store: &mut ParamStore) {
        store.snapshot_prefix(&format!("{DECODER_PREFIX}/"), &format!("{DECODER_ORI_PREFIX}/"));
    }

    pub fn has_decoder_snapshot(&self, store: &ParamStore) -> bool {
        store.has_prefix(&format!("{DECODER_ORI_PREFIX}/"))
    }

    // ---- plain (rollout/eval) paths -------------------------------------

    pub fn prior_mean_plain(
        &self,
        store: &ParamStore,
        norm: &NormStats,
        obs: &Observation,
    ) -> Result<Vec<f64>> {
        self.prior.forward_plain(store, &norm.normalize_obs(&obs.values))
    }

    /// Posterior for motion tracking: `prior(o) + enc_mt(o, window)`.
    pub fn posterior_mt_plain(
        &self,
        store: &ParamStore,
        norm: &NormStats,
        obs: &Observation,
        window: &[f64],
    ) -> Result<LatentDistribution> {
        let obs_n = norm.normalize_obs(&obs.values);
        let prior = self.prior.forward_plain(store, &obs_n)?;
        let mut input = obs_n;
        input.extend_from_slice(window);
        let residual = self.enc_mt.forward_plain(store, &input)?;
        let mean = prior.iter().zip(&residual).map(|(p, r)| p + r).collect();
        Ok(LatentDistribution { mean, sigma: self.cfg.sigma })
    }

    /// Posterior for command following: `prior(o) + enc_cf(o, c)`.
    pub fn posterior_cf_plain(
        &self,
        store: &ParamStore,
        norm: &NormStats,
        obs: &Observation,
        command: Command,
    ) -> Result<LatentDistribution> {
        let obs_n = norm.normalize_obs(&obs.values);
        let prior = self.prior.forward_plain(store, &obs_n)?;
        let mut input = obs_n;
        input.push(command.linear);
        input.push(command.angular);
        let residual = self.enc_cf.forward_plain(store, &input)?;
        let mean = prior.iter().zip(&residual).map(|(p, r)| p + r).collect();
        Ok(LatentDistribution { mean, sigma: self.cfg.sigma })
    }

    pub fn decode_plain(
        &self,
        store: &ParamStore,
        norm: &NormStats,
        obs: &Observation,
        z: &[f64],
    ) -> Result<Action> {
        let mut input = norm.normalize_obs(&obs.values);
        input.extend_from_slice(z);
        Ok(Action { target_joint_pos: self.decoder.forward_plain(store, &input)? })
    }

    /// L2 distance between the frozen original decoder and the live decoder
    /// at the same (observation, latent).
    pub fn reg_loss_plain(
        &self,
        store: &ParamStore,
        norm: &NormStats,
        obs: &Observation,
        z: &[f64],
    ) -> Result<f64> {
        if !self.has_decoder_snapshot(store) {
            return Err(Error::InvalidArgument(
                "original-decoder snapshot missing; fine-tune entry takes it".into(),
            ));
        }
        let mut input = norm.normalize_obs(&obs.values);
        input.extend_from_slice(z);
        let live = self.decoder.forward_plain(store, &input)?;
        let ori = self.decoder_ori.forward_plain(store, &input)?;
        Ok(live
            .iter()
            .zip(&ori)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

// ---- loss functions (plain) ---------------------------------------------

/// Per-component tracking terms, each in [0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingComponents {
    pub joint_pos: f64,
    pub joint_vel: f64,
    pub base_pos: f64,
    pub base_vel: f64,
}

impl TrackingComponents {
    pub fn total(&self) -> f64 {
        0.6 * self.joint_pos + 0.05 * self.joint_vel + 0.3 * self.base_pos + 0.05 * self.base_vel
    }
}

/// Weighted exponential tracking loss between a predicted state and a
/// reference frame sharing the same world frame.
pub fn tracking_loss(pred: &RobotState, reference: &RobotState) -> (f64, TrackingComponents) {
    let jpos_sq: f64 = pred
        .joint_pos
        .iter()
        .zip(&reference.joint_pos)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let jvel_sq: f64 = pred
        .joint_vel
        .iter()
        .zip(&reference.joint_vel)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let dp_sq = (pred.position[0] - reference.position[0]).powi(2)
        + (pred.position[1] - reference.position[1]).powi(2);
    let dh = wrap_angle(pred.heading - reference.heading);
    let dv_sq = (pred.body_velocity[0] - reference.body_velocity[0]).powi(2)
        + (pred.body_velocity[1] - reference.body_velocity[1]).powi(2);
    let dw = pred.yaw_rate - reference.yaw_rate;
    let comps = TrackingComponents {
        joint_pos: 1.0 - (-jpos_sq).exp(),
        joint_vel: 1.0 - (-jvel_sq).exp(),
        base_pos: 1.0 - (-20.0 * dp_sq - 10.0 * dh * dh).exp(),
        base_vel: 1.0 - (-2.0 * dv_sq - 0.2 * dw * dw).exp(),
    };
    (comps.total(), comps)
}

/// Closed-form KL divergence between the posterior and the prior when both
/// share the same isotropic covariance: `||residual||^2 / (2 sigma^2)`.
pub fn kl_loss(residual_mean: &[f64], sigma: f64) -> f64 {
    let sq: f64 = residual_mean.iter().map(|r| r * r).sum();
    sq / (2.0 * sigma * sigma)
}

/// Command-following loss `2 Lv + Lw`, each term `1 - exp(-2 |err|)`.
pub fn cf_loss(forward_velocity: f64, yaw_rate: f64, command: Command) -> f64 {
    let lv = 1.0 - (-2.0 * (command.linear - forward_velocity).abs()).exp();
    let lw = 1.0 - (-2.0 * (command.angular - yaw_rate).abs()).exp();
    2.0 * lv + lw
}

// ---- reference handling ---------------------------------------------------

/// Re-express clip frames in the world frame of `start`: frame `start_idx`
/// is mapped onto the start pose and subsequent frames follow rigidly.
/// Returns `count + 1` frames; index 0 is the aligned anchor.
pub fn anchor_clip_frames(
    clip: &ReferenceClip,
    start_idx: usize,
    start: &RobotState,
    count: usize,
) -> Result<Vec<RobotState>> {
    if start_idx + count >= clip.len() + 1 {
        return Err(Error::InsufficientData {
            context: "clip frames beyond start".into(),
            needed: start_idx + count,
            available: clip.len(),
        });
    }
    let base = &clip.frames[start_idx];
    let dh = wrap_angle(start.heading - base.heading);
    let (sin_d, cos_d) = dh.sin_cos();
    let mut out = Vec::with_capacity(count + 1);
    for k in 0..=count {
        let f = &clip.frames[start_idx + k];
        let rx = f.position[0] - base.position[0];
        let ry = f.position[1] - base.position[1];
        let mut g = f.clone();
        g.position = [
            start.position[0] + cos_d * rx - sin_d * ry,
            start.position[1] + sin_d * rx + cos_d * ry,
        ];
        g.heading = wrap_angle(f.heading + dh);
        out.push(g);
    }
    Ok(out)
}

/// Window features of the `window` future reference frames relative to the
/// current state: per frame (body-frame displacement, wrapped relative
/// heading, normalized reference body fields).
pub fn window_features(
    cfg: &PolicyConfig,
    norm: &NormStats,
    state: &RobotState,
    frames: &[RobotState],
    t: usize,
) -> Result<Vec<f64>> {
    if t + cfg.window >= frames.len() + 1 && frames.len() < t + cfg.window + 1 {
        return Err(Error::InsufficientData {
            context: "reference window".into(),
            needed: t + cfg.window + 1,
            available: frames.len(),
        });
    }
    let (sin_h, cos_h) = state.heading.sin_cos();
    let mut feats = Vec::with_capacity(cfg.window_dim());
    for k in 1..=cfg.window {
        let f = &frames[t + k];
        let dx = f.position[0] - state.position[0];
        let dy = f.position[1] - state.position[1];
        feats.push(cos_h * dx + sin_h * dy);
        feats.push(-sin_h * dx + cos_h * dy);
        feats.push(wrap_angle(f.heading - state.heading));
        let mut obs_form = Vec::with_capacity(cfg.obs_dim());
        obs_form.extend_from_slice(&f.body_velocity);
        obs_form.push(f.yaw_rate);
        obs_form.extend_from_slice(&f.joint_pos);
        obs_form.extend_from_slice(&f.joint_vel);
        feats.extend(norm.normalize_obs(&obs_form));
    }
    Ok(feats)
}

// ---- taped losses ----------------------------------------------------------

/// Which policy networks receive gradients in a motion-tracking update.
/// The world model is always frozen here.
#[derive(Debug, Clone, Copy)]
pub struct MtTrainables {
    pub prior: bool,
    pub encoder: bool,
    pub decoder: bool,
}

impl MtTrainables {
    pub fn scratch() -> Self {
        MtTrainables { prior: true, encoder: true, decoder: true }
    }
}

/// Which networks receive gradients in a command-following update. The
/// prior and the world model are always frozen.
#[derive(Debug, Clone, Copy)]
pub struct CfTrainables {
    pub encoder: bool,
    pub decoder: bool,
}

impl CfTrainables {
    pub fn scratch() -> Self {
        CfTrainables { encoder: true, decoder: false }
    }

    pub fn finetune() -> Self {
        CfTrainables { encoder: true, decoder: true }
    }
}

/// One motion-tracking batch element: a start state and world-anchored
/// reference frames covering at least `n + window` steps past the anchor.
#[derive(Debug, Clone)]
pub struct MtBatchItem {
    pub start: RobotState,
    pub anchored: Vec<RobotState>,
}

/// One command-following batch element.
#[derive(Debug, Clone)]
pub struct CfBatchItem {
    pub start: RobotState,
    pub command: Command,
}

/// Scalar logging parts of a policy loss evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct PolicyLossParts {
    /// Mean per-step tracking loss (MT) or command loss (CF).
    pub main_per_step: f64,
    /// Mean per-step KL (MT) or decoder-drift regularizer (CF).
    pub aux_per_step: f64,
}

fn batch_tracking_loss_tape(tape: &mut Tape, pred: &StateVars, target: &StateVars) -> Var {
    // joint position / velocity terms
    let d_jp = tape.sub(pred.joint_pos, target.joint_pos);
    let d_jp2 = tape.square(d_jp);
    let jp_sq = tape.row_sum(d_jp2);
    let jp_arg = tape.affine(jp_sq, -1.0, 0.0);
    let jp_exp = tape.exp(jp_arg);
    let l_jpos = tape.affine(jp_exp, -1.0, 1.0);

    let d_jv = tape.sub(pred.joint_vel, target.joint_vel);
    let d_jv2 = tape.square(d_jv);
    let jv_sq = tape.row_sum(d_jv2);
    let jv_arg = tape.affine(jv_sq, -1.0, 0.0);
    let jv_exp = tape.exp(jv_arg);
    let l_jvel = tape.affine(jv_exp, -1.0, 1.0);

    // base pose term: 1 - exp(-20 ||dp||^2 - 10 dh^2)
    let d_p = tape.sub(pred.pos, target.pos);
    let d_p2 = tape.square(d_p);
    let p_sq = tape.row_sum(d_p2);
    let dh_raw = tape.sub(pred.heading, target.heading);
    let dh = tape.wrap_angle(dh_raw);
    let dh2 = tape.square(dh);
    let p_term = tape.affine(p_sq, -20.0, 0.0);
    let h_term = tape.affine(dh2, -10.0, 0.0);
    let bp_arg = tape.add(p_term, h_term);
    let bp_exp = tape.exp(bp_arg);
    let l_bpos = tape.affine(bp_exp, -1.0, 1.0);

    // base velocity term: 1 - exp(-2 ||dv||^2 - 0.2 dw^2)
    let pred_v = tape.slice_cols(pred.twist, 0, 2);
    let tgt_v = tape.slice_cols(target.twist, 0, 2);
    let d_v = tape.sub(pred_v, tgt_v);
    let d_v2 = tape.square(d_v);
    let v_sq = tape.row_sum(d_v2);
    let pred_w = tape.slice_cols(pred.twist, 2, 3);
    let tgt_w = tape.slice_cols(target.twist, 2, 3);
    let d_w = tape.sub(pred_w, tgt_w);
    let w2 = tape.square(d_w);
    let v_term = tape.affine(v_sq, -2.0, 0.0);
    let w_term = tape.affine(w2, -0.2, 0.0);
    let bv_arg = tape.add(v_term, w_term);
    let bv_exp = tape.exp(bv_arg);
    let l_bvel = tape.affine(bv_exp, -1.0, 1.0);

    let jp_w = tape.scale(l_jpos, 0.6);
    let jv_w = tape.scale(l_jvel, 0.05);
    let bp_w = tape.scale(l_bpos, 0.3);
    let bv_w = tape.scale(l_bvel, 0.05);
    let a = tape.add(jp_w, jv_w);
    let b = tape.add(bp_w, bv_w);
    tape.add(a, b)
}

fn anchored_frame_vars(tape: &mut Tape, items: &[MtBatchItem], idx: usize) -> StateVars {
    let refs: Vec<&RobotState> = items.iter().map(|it| &it.anchored[idx]).collect();
    state_batch(tape, &refs)
}

/// n-step motion-tracking policy loss through the (frozen) world model:
/// per step, the tracking loss on the predicted state plus 0.1 times the
/// posterior KL, averaged over the batch and summed over steps.
#[allow(clippy::too_many_arguments)]
pub fn mt_policy_loss_tape(
    tape: &mut Tape,
    store: &ParamStore,
    wm: &WorldModel,
    nets: &PolicyNets,
    norm: &NormStats,
    items: &[MtBatchItem],
    horizon: usize,
    noise: &[Tensor],
    train: MtTrainables,
) -> Result<(Var, PolicyLossParts)> {
    let b = items.len();
    let cfg = &nets.cfg;
    if b == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("empty motion-tracking batch".into()));
    }
    for it in items {
        if it.anchored.len() < horizon + cfg.window + 1 {
            return Err(Error::InsufficientData {
                context: "anchored reference frames".into(),
                needed: horizon + cfg.window + 1,
                available: it.anchored.len(),
            });
        }
    }
    if noise.len() < horizon {
        return Err(Error::InvalidArgument("need one noise tensor per step".into()));
    }

    let starts: Vec<&RobotState> = items.iter().map(|it| &it.start).collect();
    let mut current = state_batch(tape, &starts);
    let mut total: Option<Var> = None;
    let mut parts = PolicyLossParts::default();

    for t in 0..horizon {
        let obs_raw = tape.concat_cols(&[current.twist, current.joint_pos, current.joint_vel]);
        let obs_n = normalize_cols(tape, obs_raw, &norm.obs_mean, &norm.obs_std);

        // window features from the anchored reference, relative to the
        // current predicted pose
        let cos_h = tape.cos(current.heading);
        let sin_h = tape.sin(current.heading);
        let mut window_parts: Vec<Var> = Vec::with_capacity(cfg.window * 4);
        for k in 1..=cfg.window {
            let frame = anchored_frame_vars(tape, items, t + k);
            let dp = tape.sub(frame.pos, current.pos);
            let dx = tape.slice_cols(dp, 0, 1);
            let dy = tape.slice_cols(dp, 1, 2);
            let cx = tape.mul(cos_h, dx);
            let sy = tape.mul(sin_h, dy);
            let dxb = tape.add(cx, sy);
            let sx = tape.mul(sin_h, dx);
            let cy = tape.mul(cos_h, dy);
            let neg_sx = tape.scale(sx, -1.0);
            let dyb = tape.add(neg_sx, cy);
            let dh_raw = tape.sub(frame.heading, current.heading);
            let dh = tape.wrap_angle(dh_raw);
            let body_raw = tape.concat_cols(&[frame.twist, frame.joint_pos, frame.joint_vel]);
            let body_n = normalize_cols(tape, body_raw, &norm.obs_mean, &norm.obs_std);
            window_parts.extend([dxb, dyb, dh, body_n]);
        }
        let window = tape.concat_cols(&window_parts);

        let prior_mean = nets.prior.forward(tape, store, obs_n, train.prior)?;
        let enc_in = tape.concat_cols(&[obs_n, window]);
        let residual = nets.enc_mt.forward(tape, store, enc_in, train.encoder)?;
        let post = tape.add(prior_mean, residual);
        let eps = tape.constant(noise[t].clone());
        let z = tape.add(post, eps);
        let dec_in = tape.concat_cols(&[obs_n, z]);
        let action_raw = nets.decoder.forward(tape, store, dec_in, train.decoder)?;
        let action = tape.clamp_sym(action_raw, std::f64::consts::FRAC_PI_2);

        current = wm.predict_tape(tape, store, norm, &current, action, false)?;

        let target = anchored_frame_vars(tape, items, t + 1);
        let l_track = batch_tracking_loss_tape(tape, &current, &target);
        let track_mean = tape.mean_all(l_track);

        let res_sq = tape.square(residual);
        let res_rows = tape.row_sum(res_sq);
        let kl = tape.affine(res_rows, 1.0 / (2.0 * cfg.sigma * cfg.sigma), 0.0);
        let kl_mean = tape.mean_all(kl);

        parts.main_per_step += tape.value(track_mean).item();
        parts.aux_per_step += tape.value(kl_mean).item();

        let kl_term = tape.scale(kl_mean, 0.1);
        let step_total = tape.add(track_mean, kl_term);
        total = Some(match total {
            None => step_total,
            Some(acc) => tape.add(acc, step_total),
        });
    }
    parts.main_per_step /= horizon as f64;
    parts.aux_per_step /= horizon as f64;
    Ok((total.unwrap(), parts))
}

/// n-step command-following loss through the (frozen) world model, plus
/// `reg_weight` times the decoder-drift regularizer. The prior is always
/// frozen; the command is held constant over the unroll. Whenever the
/// original-decoder snapshot exists the drift is measured and reported even
/// at weight zero (the ablation setting), so drift stays observable.
#[allow(clippy::too_many_arguments)]
pub fn cf_policy_loss_tape(
    tape: &mut Tape,
    store: &ParamStore,
    wm: &WorldModel,
    nets: &PolicyNets,
    norm: &NormStats,
    items: &[CfBatchItem],
    horizon: usize,
    noise: &[Tensor],
    reg_weight: f64,
    train: CfTrainables,
) -> Result<(Var, PolicyLossParts)> {
    let b = items.len();
    if b == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("empty command-following batch".into()));
    }
    if noise.len() < horizon {
        return Err(Error::InvalidArgument("need one noise tensor per step".into()));
    }
    let has_snapshot = nets.has_decoder_snapshot(store);
    if reg_weight > 0.0 && !has_snapshot {
        return Err(Error::InvalidArgument(
            "original-decoder snapshot missing; fine-tune entry takes it".into(),
        ));
    }

    let starts: Vec<&RobotState> = items.iter().map(|it| &it.start).collect();
    let mut current = state_batch(tape, &starts);

    let mut cmd_data = Vec::with_capacity(b * 2);
    let mut v_data = Vec::with_capacity(b);
    let mut w_data = Vec::with_capacity(b);
    for it in items {
        cmd_data.push(it.command.linear);
        cmd_data.push(it.command.angular);
        v_data.push(it.command.linear);
        w_data.push(it.command.angular);
    }
    let cmd = tape.constant(Tensor::matrix(b, 2, cmd_data));
    let v_cmd = tape.constant(Tensor::matrix(b, 1, v_data));
    let w_cmd = tape.constant(Tensor::matrix(b, 1, w_data));

    let mut total: Option<Var> = None;
    let mut parts = PolicyLossParts::default();

    for t in 0..horizon {
        let obs_raw = tape.concat_cols(&[current.twist, current.joint_pos, current.joint_vel]);
        let obs_n = normalize_cols(tape, obs_raw, &norm.obs_mean, &norm.obs_std);

        let prior_mean = nets.prior.forward(tape, store, obs_n, false)?;
        let enc_in = tape.concat_cols(&[obs_n, cmd]);
        let residual = nets.enc_cf.forward(tape, store, enc_in, train.encoder)?;
        let post = tape.add(prior_mean, residual);
        let eps = tape.constant(noise[t].clone());
        let z = tape.add(post, eps);
        let dec_in = tape.concat_cols(&[obs_n, z]);
        let action_raw = nets.decoder.forward(tape, store, dec_in, train.decoder)?;
        let action = tape.clamp_sym(action_raw, std::f64::consts::FRAC_PI_2);

        let reg_mean = if has_snapshot {
            let ori = nets.decoder_ori.forward(tape, store, dec_in, false)?;
            let d = tape.sub(action_raw, ori);
            let r = tape.row_norm(d);
            Some(tape.mean_all(r))
        } else {
            None
        };

        current = wm.predict_tape(tape, store, norm, &current, action, false)?;

        let vx = tape.slice_cols(current.twist, 0, 1);
        let wz = tape.slice_cols(current.twist, 2, 3);
        let dv_raw = tape.sub(v_cmd, vx);
        let dv = tape.abs(dv_raw);
        let dv_arg = tape.affine(dv, -2.0, 0.0);
        let dv_exp = tape.exp(dv_arg);
        let l_v = tape.affine(dv_exp, -1.0, 1.0);
        let dw_raw = tape.sub(w_cmd, wz);
        let dw = tape.abs(dw_raw);
        let dw_arg = tape.affine(dw, -2.0, 0.0);
        let dw_exp = tape.exp(dw_arg);
        let l_w = tape.affine(dw_exp, -1.0, 1.0);
        let lv2 = tape.scale(l_v, 2.0);
        let l_cf = tape.add(lv2, l_w);
        let cf_mean = tape.mean_all(l_cf);

        parts.main_per_step += tape.value(cf_mean).item();

        let step_total = match reg_mean {
            Some(r) => {
                parts.aux_per_step += tape.value(r).item();
                if reg_weight > 0.0 {
                    let rw = tape.scale(r, reg_weight);
                    tape.add(cf_mean, rw)
                } else {
                    cf_mean
                }
            }
            None => cf_mean,
        };
        total = Some(match total {
            None => step_total,
            Some(acc) => tape.add(acc, step_total),
        });
    }
    parts.main_per_step /= horizon as f64;
    parts.aux_per_step /= horizon as f64;
    Ok((total.unwrap(), parts))
}

/// Draw per-step latent noise tensors `[batch, z] * sigma` for an unroll.
pub fn draw_step_noise(
    batch: usize,
    z_dim: usize,
    sigma: f64,
    horizon: usize,
    rng: &mut impl Rng,
) -> Vec<Tensor> {
    (0..horizon)
        .map(|_| {
            let data =
                (0..batch * z_dim).map(|_| sigma * crate::autodiff::gaussian(rng)).collect();
            Tensor::matrix(batch, z_dim, data)
        })
        .collect()
}

/// Zero noise (posterior means) for evaluation unrolls.
pub fn zero_step_noise(batch: usize, z_dim: usize, horizon: usize) -> Vec<Tensor> {
    (0..horizon).map(|_| Tensor::zeros(vec![batch, z_dim])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{self, observe, PhysicalParams, DEFAULT_JOINTS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn small_cfg() -> PolicyConfig {
        PolicyConfig { num_joints: DEFAULT_JOINTS, z_dim: 4, window: 2, sigma: 0.3, hidden: vec![16] }
    }

    fn randomize_final_layers(nets: &PolicyNets, store: &mut ParamStore, rng: &mut impl Rng) {
        for spec in [&nets.prior, &nets.enc_mt, &nets.enc_cf, &nets.decoder] {
            let name = spec.weight_name(spec.num_layers() - 1);
            for v in &mut store.get_mut(&name).unwrap().data {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }

    fn random_state(rng: &mut impl Rng) -> RobotState {
        let mut s = RobotState::zero(DEFAULT_JOINTS);
        s.position = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        s.heading = rng.random_range(-3.0..3.0);
        s.body_velocity = [rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2)];
        s.yaw_rate = rng.random_range(-1.0..1.0);
        for i in 0..DEFAULT_JOINTS {
            s.joint_pos[i] = rng.random_range(-1.0..1.0);
            s.joint_vel[i] = rng.random_range(-2.0..2.0);
        }
        s
    }

    #[test]
    fn tracking_loss_hand_values() {
        let reference = RobotState::zero(DEFAULT_JOINTS);
        // unit joint error: ||d||^2 = 1 spread over joints
        let mut pred = reference.clone();
        for v in &mut pred.joint_pos {
            *v = (1.0f64 / DEFAULT_JOINTS as f64).sqrt();
        }
        let (total, comps) = tracking_loss(&pred, &reference);
        let e1 = 1.0 - (-1.0f64).exp();
        assert!((comps.joint_pos - e1).abs() < 1e-12);
        assert!((total - 0.6 * e1).abs() < 1e-12);
        assert!((total - 0.3793).abs() < 1e-4);

        // base position error ||dp||^2 = 0.05 with exact orientation
        let mut pred2 = reference.clone();
        pred2.position = [0.05f64.sqrt(), 0.0];
        let (_, comps2) = tracking_loss(&pred2, &reference);
        assert!((comps2.base_pos - e1).abs() < 1e-12);

        // exact agreement: all zeros
        let (t0, c0) = tracking_loss(&reference, &reference);
        assert_eq!(t0, 0.0);
        assert_eq!(c0.joint_pos, 0.0);
        assert_eq!(c0.base_vel, 0.0);
    }

    #[test]
    fn kl_hand_value_and_gaussian_identity() {
        assert_eq!(kl_loss(&[0.0, 0.0], 0.5), 0.0);
        let v = kl_loss(&[0.3, 0.4], 0.3);
        assert!((v - 0.25 / 0.18).abs() < 1e-12, "{v}");

        // general equal-covariance diagonal Gaussian KL oracle
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..100 {
            let dim = rng.random_range(1..8);
            let sigma: f64 = rng.random_range(0.05..2.0);
            let res: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let general: f64 = res
                .iter()
                .map(|r| {
                    // log(s0/s1) + (s1^2 + r^2) / (2 s0^2) - 1/2 with s0 == s1
                    (sigma / sigma).ln() + (sigma * sigma + r * r) / (2.0 * sigma * sigma) - 0.5
                })
                .sum();
            assert!((kl_loss(&res, sigma) - general).abs() < 1e-10);
        }
    }

    #[test]
    fn cf_loss_hand_values() {
        let cmd = Command { linear: 0.9, angular: 0.2 };
        assert_eq!(cf_loss(0.9, 0.2, cmd), 0.0);
        let v = cf_loss(0.4, 0.2, cmd); // |dv| = 0.5
        let expect = 2.0 * (1.0 - (-1.0f64).exp());
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 1.2642).abs() < 1e-4);
        // asymptote: approaches but never reaches 3
        let big = cf_loss(0.9 - 8.0, 0.2 + 7.0, cmd);
        assert!(big < 3.0 && big > 2.9999, "{big}");
    }

    #[test]
    fn fresh_posteriors_equal_prior() {
        let cfg = small_cfg();
        let nets = PolicyNets::new(cfg.clone());
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        nets.init_params(&mut store, &mut rng);
        // only the prior's final layer gets values: residual encoders stay zero
        let name = nets.prior.weight_name(nets.prior.num_layers() - 1);
        for v in &mut store.get_mut(&name).unwrap().data {
            *v = rng.random_range(-0.3..0.3);
        }
        let norm = NormStats::identity(DEFAULT_JOINTS);
        let s = random_state(&mut rng);
        let obs = observe(&s);
        let window = vec![0.2; cfg.window_dim()];
        let prior = nets.prior_mean_plain(&store, &norm, &obs).unwrap();
        let mt = nets.posterior_mt_plain(&store, &norm, &obs, &window).unwrap();
        let cf = nets
            .posterior_cf_plain(&store, &norm, &obs, Command { linear: 0.5, angular: -0.3 })
            .unwrap();
        assert_eq!(mt.mean, prior);
        assert_eq!(cf.mean, prior);
        assert_eq!(mt.sigma, cfg.sigma);
    }

    #[test]
    fn posterior_composition_matches_separate_forwards() {
        let cfg = small_cfg();
        let nets = PolicyNets::new(cfg.clone());
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        nets.init_params(&mut store, &mut rng);
        randomize_final_layers(&nets, &mut store, &mut rng);
        let norm = NormStats::identity(DEFAULT_JOINTS);
        let s = random_state(&mut rng);
        let obs = observe(&s);
        let window: Vec<f64> = (0..cfg.window_dim()).map(|i| (i as f64 * 0.13).sin()).collect();

        let obs_n = norm.normalize_obs(&obs.values);
        let prior = nets.prior.forward_plain(&store, &obs_n).unwrap();
        let mut mt_in = obs_n.clone();
        mt_in.extend_from_slice(&window);
        let res = nets.enc_mt.forward_plain(&store, &mt_in).unwrap();
        let expect: Vec<f64> = prior.iter().zip(&res).map(|(p, r)| p + r).collect();

        let mt = nets.posterior_mt_plain(&store, &norm, &obs, &window).unwrap();
        assert_eq!(mt.mean, expect);

        // command dependence: two commands give different means
        let c1 = nets
            .posterior_cf_plain(&store, &norm, &obs, Command { linear: 0.2, angular: 0.0 })
            .unwrap();
        let c2 = nets
            .posterior_cf_plain(&store, &norm, &obs, Command { linear: 1.2, angular: 0.5 })
            .unwrap();
        assert_ne!(c1.mean, c2.mean);
        // determinism
        let again = nets.posterior_mt_plain(&store, &norm, &obs, &window).unwrap();
        assert_eq!(again.mean, mt.mean);
    }

    #[test]
    fn latent_sampling_statistics_and_limit() {
        let dist = LatentDistribution { mean: vec![0.7, -1.1], sigma: 0.0 };
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        assert_eq!(sample_latent(&dist, &mut rng), dist.mean);

        let dist = LatentDistribution { mean: vec![0.7, -1.1], sigma: 0.3 };
        let n = 100_000;
        let mut acc = [0.0f64; 2];
        for _ in 0..n {
            let z = sample_latent(&dist, &mut rng);
            acc[0] += z[0];
            acc[1] += z[1];
        }
        let tol = 3.0 * dist.sigma / (n as f64).sqrt();
        assert!((acc[0] / n as f64 - 0.7).abs() < tol);
        assert!((acc[1] / n as f64 + 1.1).abs() < tol);
    }

    #[test]
    fn reparameterized_gradient_of_norm_squared_is_two_z() {
        // z = mean + sigma*eps, loss = ||z||^2: dL/dmean = 2 z
        let mut store = ParamStore::new();
        store.insert("mean", Tensor::vector(vec![0.4, -0.9, 0.1]));
        let eps = [0.37, -1.2, 0.55];
        let sigma = 0.3;
        let mut tape = Tape::new();
        let m = tape.param(&store, "mean");
        let noise = tape.constant(Tensor::vector(eps.iter().map(|e| sigma * e).collect()));
        let z = tape.add(m, noise);
        let z2 = tape.square(z);
        let loss = tape.sum_all(z2);
        tape.backward(loss).unwrap();
        let g = tape.param_grad("mean").unwrap();
        let zv = tape.value(z).data.clone();
        for (gi, zi) in g.data.iter().zip(&zv) {
            assert!((gi - 2.0 * zi).abs() < 1e-12);
        }
    }

    #[test]
    fn fresh_decoder_outputs_zero_action() {
        let cfg = small_cfg();
        let nets = PolicyNets::new(cfg.clone());
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        nets.init_params(&mut store, &mut rng);
        let norm = NormStats::identity(DEFAULT_JOINTS);
        let s = random_state(&mut rng);
        let act = nets.decode_plain(&store, &norm, &observe(&s), &vec![0.5; cfg.z_dim]).unwrap();
        assert_eq!(act.target_joint_pos, vec![0.0; DEFAULT_JOINTS]);
    }

    #[test]
    fn reg_loss_zero_then_tracks_perturbation() {
        let cfg = small_cfg();
        let nets = PolicyNets::new(cfg.clone());
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        nets.init_params(&mut store, &mut rng);
        randomize_final_layers(&nets, &mut store, &mut rng);
        let norm = NormStats::identity(DEFAULT_JOINTS);
        let s = random_state(&mut rng);
        let obs = observe(&s);
        let z = vec![0.2; cfg.z_dim];

        // missing snapshot is an error
        assert!(nets.reg_loss_plain(&store, &norm, &obs, &z).is_err());

        nets.snapshot_decoder(&mut store);
        let r0 = nets.reg_loss_plain(&store, &norm, &obs, &z).unwrap();
        assert_eq!(r0, 0.0);

        // perturb one decoder output bias by delta: ||diff|| = |delta|
        let delta = 0.07;
        let bias = nets.decoder.bias_name(nets.decoder.num_layers() - 1);
        store.get_mut(&bias).unwrap().data[2] += delta;
        let r1 = nets.reg_loss_plain(&store, &norm, &obs, &z).unwrap();
        assert!((r1 - delta).abs() < 1e-12, "{r1}");
    }

    fn make_clip() -> ReferenceClip {
        envsim::scripted_gait_reference(0.9, 0.3, 3.0, &PhysicalParams::original(), DEFAULT_JOINTS)
            .unwrap()
    }

    #[test]
    fn anchoring_preserves_relative_motion() {
        let clip = make_clip();
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let start = random_state(&mut rng);
        let frames = anchor_clip_frames(&clip, 10, &start, 20).unwrap();
        assert_eq!(frames.len(), 21);
        assert_eq!(frames[0].position, start.position);
        assert_eq!(frames[0].heading, start.heading);
        // relative displacements match the clip's, rotated rigidly
        let d_clip = ((clip.frames[15].position[0] - clip.frames[10].position[0]).powi(2)
            + (clip.frames[15].position[1] - clip.frames[10].position[1]).powi(2))
        .sqrt();
        let d_anchor = ((frames[5].position[0] - frames[0].position[0]).powi(2)
            + (frames[5].position[1] - frames[0].position[1]).powi(2))
        .sqrt();
        assert!((d_clip - d_anchor).abs() < 1e-12);
        // body fields are untouched
        assert_eq!(frames[5].joint_pos, clip.frames[15].joint_pos);
    }

    #[test]
    fn mt_loss_on_perfect_tracking_reduces_to_kl() {
        // identity world model (zero residual net), stationary zero clip, and
        // a start state equal to the clip frame: the tracking term vanishes
        // exactly and the loss is 0.1 * KL of the encoder residual.
        let cfg = small_cfg();
        let nets = PolicyNets::new(cfg.clone());
        let wm = WorldModel::new(DEFAULT_JOINTS, &[16]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        nets.init_params(&mut store, &mut rng);
        wm.init_params(&mut store, &mut rng);
        randomize_final_layers(&nets, &mut store, &mut rng);
        let norm = NormStats::identity(DEFAULT_JOINTS);

        let zero = RobotState::zero(DEFAULT_JOINTS);
        let clip = ReferenceClip { dt: envsim::DT, speed: 0.0, frames: vec![zero.clone(); 10] };
        let anchored = anchor_clip_frames(&clip, 0, &zero, 5).unwrap();
        let items = vec![MtBatchItem { start: zero.clone(), anchored }];
        let noise = zero_step_noise(1, cfg.z_dim, 1);

        let mut tape = Tape::new();
        let (loss, parts) = mt_policy_loss_tape(
            &mut tape,
            &store,
            &wm,
            &nets,
            &norm,
            &items,
            1,
            &noise,
            MtTrainables::scratch(),
        )
        .unwrap();
        let loss_v = tape.value(loss).item();
        assert_eq!(parts.main_per_step, 0.0, "tracking term should vanish");

        // independent KL: residual of the encoder at (zero obs, window)
        let obs = observe(&zero);
        let window = window_features(&cfg, &norm, &zero, &items[0].anchored, 0).unwrap();
        let obs_n = norm.normalize_obs(&obs.values);
        let mut enc_in = obs_n.clone();
        enc_in.extend_from_slice(&window);
        let res = nets.enc_mt.forward_plain(&store, &enc_in).unwrap();
        let expect = 0.1 * kl_loss(&res, cfg.sigma);
        assert!((loss_v - expect).abs() < 1e-12, "{loss_v} vs {expect}");
    }

    #[test]
    fn frozen_world_model_gets_zero_gradient_in_mt_loss() {
        let cfg = small_cfg();
        let nets = PolicyNets::new(cfg.clone());
        let wm = WorldModel::new(DEFAULT_JOINTS, &[16]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        nets.init_params(&mut store, &mut rng);
        wm.init_params(&mut store, &mut rng);
        randomize_final_layers(&nets, &mut store, &mut rng);
        for v in &mut store.get_mut("wm/l1/w").unwrap().data {
            *v = rng.random_range(-0.05..0.05);
        }
        let norm = NormStats::identity(DEFAULT_JOINTS);
        let clip = make_clip();
        let start = clip.frames[5].clone();
        let anchored = anchor_clip_frames(&clip, 5, &start, 8).unwrap();
        let items = vec![MtBatchItem { start, anchored }];
        let noise = draw_step_noise(1, cfg.z_dim, cfg.sigma, 4, &mut rng);

        let mut tape = Tape::new();
        let (loss, _) = mt_policy_loss_tape(
            &mut tape,
            &store,
            &wm,
            &nets,
            &norm,
            &items,
            4,
            &noise,
            MtTrainables::scratch(),
        )
        .unwrap();
        tape.backward(loss).unwrap();
        let grads = tape.param_grads();
        assert!(grads.keys().all(|k| !k.starts_with("wm/")), "world model must stay frozen");
        let wm_grad = tape.param_grad("wm/l1/w").unwrap();
        assert!(wm_grad.data.iter().all(|g| *g == 0.0));
        // policy nets do receive gradient
        assert!(grads.contains_key("prior/l0/w"));
        let some = grads["dec/l1/w"].data.iter().any(|g| *g != 0.0);
        assert!(some, "decoder gradient vanished");
    }

    #[test]
    fn cf_scratch_freezes_prior_and_decoder() {
        let cfg = small_cfg();
        let nets = PolicyNets::new(cfg.clone());
        let wm = WorldModel::new(DEFAULT_JOINTS, &[16]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        nets.init_params(&mut store, &mut rng);
        wm.init_params(&mut store, &mut rng);
        randomize_final_layers(&nets, &mut store, &mut rng);
        for v in &mut store.get_mut("wm/l1/w").unwrap().data {
            *v = rng.random_range(-0.05..0.05);
        }
        let norm = NormStats::identity(DEFAULT_JOINTS);
        let start = random_state(&mut rng);
        let items =
            vec![CfBatchItem { start, command: Command { linear: 0.8, angular: -0.2 } }];
        let noise = draw_step_noise(1, cfg.z_dim, cfg.sigma, 3, &mut rng);

        let mut tape = Tape::new();
        let (loss, _) = cf_policy_loss_tape(
            &mut tape,
            &store,
            &wm,
            &nets,
            &norm,
            &items,
            3,
            &noise,
            0.0,
            CfTrainables::scratch(),
        )
        .unwrap();
        tape.backward(loss).unwrap();
        let grads = tape.param_grads();
        assert!(grads.keys().all(|k| k.starts_with("enc_cf/")), "only enc_cf trains: {grads:?}");
        assert!(tape.param_grad("prior/l0/w").unwrap().data.iter().all(|g| *g == 0.0));
        assert!(tape.param_grad("dec/l0/w").unwrap().data.iter().all(|g| *g == 0.0));
        let lively = grads["enc_cf/l0/w"].data.iter().any(|g| *g != 0.0);
        assert!(lively);
    }

    #[test]
    fn reg_term_vanishes_for_identical_decoders() {
        let cfg = small_cfg();
        let nets = PolicyNets::new(cfg.clone());
        let wm = WorldModel::new(DEFAULT_JOINTS, &[16]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(18);
        nets.init_params(&mut store, &mut rng);
        wm.init_params(&mut store, &mut rng);
        randomize_final_layers(&nets, &mut store, &mut rng);
        nets.snapshot_decoder(&mut store);
        let norm = NormStats::identity(DEFAULT_JOINTS);
        let start = random_state(&mut rng);
        let items = vec![CfBatchItem { start, command: Command { linear: 0.5, angular: 0.1 } }];
        let noise = draw_step_noise(1, cfg.z_dim, cfg.sigma, 2, &mut rng);

        let mut tape = Tape::new();
        let (_, parts) = cf_policy_loss_tape(
            &mut tape,
            &store,
            &wm,
            &nets,
            &norm,
            &items,
            2,
            &noise,
            0.1,
            CfTrainables::finetune(),
        )
        .unwrap();
        assert_eq!(parts.aux_per_step, 0.0);
    }

    #[test]
    fn window_features_are_frame_relative() {
        let cfg = small_cfg();
        let norm = NormStats::identity(DEFAULT_JOINTS);
        let clip = make_clip();
        let state = clip.frames[20].clone();
        let feats = window_features(&cfg, &norm, &state, &clip.frames, 20).unwrap();
        assert_eq!(feats.len(), cfg.window_dim());
        // first frame's displacement expressed in the body frame: rotating
        // the world delta back must recover it
        let f = &clip.frames[21];
        let (sin_h, cos_h) = state.heading.sin_cos();
        let dx = f.position[0] - state.position[0];
        let dy = f.position[1] - state.position[1];
        assert!((feats[0] - (cos_h * dx + sin_h * dy)).abs() < 1e-12);
        assert!((feats[1] - (-sin_h * dx + cos_h * dy)).abs() < 1e-12);
    }
}
