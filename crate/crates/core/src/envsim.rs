//! Deterministic analytic surrogate quadruped environment: PD-driven joints
//! behind a latency blend, a gait-to-twist coupling, and planar (SE(2)) pose
//! integration. Also generates scripted-gait reference clips used as motion
//! targets.
//!
//! The twist coupling drives forward speed from rectified joint sweep rate
//! gated by joint posture, and lateral/yaw rates from posture contrasts, so
//! commanded speeds and turn rates are sustainable and every physical knob
//! (mass, Kp, latency, torque limit) stays observable in the dynamics.

use serde::{Deserialize, Serialize};

use crate::autodiff::wrap_angle;
use crate::error::{Error, Result};

/// Control period in seconds (50 Hz).
pub const DT: f64 = 0.02;

/// Default joint count.
pub const DEFAULT_JOINTS: usize = 8;

/// Reference mass the inertia and twist time constants are normalized to.
pub const REFERENCE_MASS: f64 = 5.74;

/// Forward-speed coupling weight per joint.
pub const W_FORWARD: f64 = 0.04;
/// Lateral coupling weight (+ even joints, - odd joints).
pub const W_LATERAL: f64 = 0.05;
/// Yaw coupling weight (+ first half, - second half).
pub const W_YAW: f64 = 0.25;

/// Physical knobs of the surrogate (Table-style presets below).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    pub mass: f64,
    pub kp: f64,
    pub control_latency_ms: f64,
    pub max_torque: f64,
}

impl PhysicalParams {
    pub fn original() -> Self {
        PhysicalParams { mass: 5.74, kp: 50.0, control_latency_ms: 0.0, max_torque: 18.0 }
    }

    pub fn env1() -> Self {
        PhysicalParams { mass: 14.0, kp: 40.0, control_latency_ms: 6.0, max_torque: 16.2 }
    }

    /// Original with an added payload, 6 ms latency (payload in kg).
    pub fn with_payload(payload: f64) -> Self {
        PhysicalParams {
            mass: 5.74 + payload,
            kp: 50.0,
            control_latency_ms: 6.0,
            max_torque: 18.0,
        }
    }

    pub fn env2() -> Self {
        Self::with_payload(3.0)
    }

    pub fn env3() -> Self {
        Self::with_payload(5.0)
    }

    pub fn env4() -> Self {
        Self::with_payload(7.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) {
            return Err(Error::InvalidArgument(format!("mass must be > 0, got {}", self.mass)));
        }
        if !(self.kp > 0.0) {
            return Err(Error::InvalidArgument(format!("kp must be > 0, got {}", self.kp)));
        }
        if !(0.0..1000.0 * DT).contains(&self.control_latency_ms) {
            return Err(Error::InvalidArgument(format!(
                "control latency must lie in [0, {}) ms, got {}",
                1000.0 * DT,
                self.control_latency_ms
            )));
        }
        if !(self.max_torque > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "max torque must be > 0, got {}",
                self.max_torque
            )));
        }
        Ok(())
    }

    /// Per-joint inertia, scaled with mass.
    pub fn joint_inertia(&self) -> f64 {
        0.1 * (self.mass / REFERENCE_MASS)
    }

    /// Twist relaxation time constant, scaled with mass.
    pub fn twist_time_constant(&self) -> f64 {
        0.1 * (self.mass / REFERENCE_MASS)
    }

    pub fn kd(&self) -> f64 {
        self.kp / 10.0
    }

    /// Latency blend factor in [0, 1].
    pub fn latency_blend(&self) -> f64 {
        (self.control_latency_ms / (1000.0 * DT)).clamp(0.0, 1.0)
    }
}

/// Full simulator state: planar base pose, body-frame twist, joint positions
/// and velocities, and the previous action held for the latency blend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub position: [f64; 2],
    pub heading: f64,
    pub body_velocity: [f64; 2],
    pub yaw_rate: f64,
    pub joint_pos: Vec<f64>,
    pub joint_vel: Vec<f64>,
    pub prev_action: Vec<f64>,
}

impl RobotState {
    pub fn zero(num_joints: usize) -> Self {
        RobotState {
            position: [0.0, 0.0],
            heading: 0.0,
            body_velocity: [0.0, 0.0],
            yaw_rate: 0.0,
            joint_pos: vec![0.0; num_joints],
            joint_vel: vec![0.0; num_joints],
            prev_action: vec![0.0; num_joints],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joint_pos.len()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.heading.is_finite()
            && self.body_velocity.iter().all(|v| v.is_finite())
            && self.yaw_rate.is_finite()
            && self.joint_pos.iter().all(|v| v.is_finite())
            && self.joint_vel.iter().all(|v| v.is_finite())
            && self.prev_action.iter().all(|v| v.is_finite())
    }

    /// The 6 + 2J dynamic fields in fixed order:
    /// x, y, heading, vx, vy, yaw_rate, joint_pos.., joint_vel..
    pub fn dynamic_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(6 + 2 * self.num_joints());
        v.extend_from_slice(&self.position);
        v.push(self.heading);
        v.extend_from_slice(&self.body_velocity);
        v.push(self.yaw_rate);
        v.extend_from_slice(&self.joint_pos);
        v.extend_from_slice(&self.joint_vel);
        v
    }

    /// All fields including the latency buffer, in declaration order.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.dynamic_vec();
        v.extend_from_slice(&self.prev_action);
        v
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() < 6 || (values.len() - 6) % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "state vector length {} is not 6 + 3J",
                values.len()
            )));
        }
        let j = (values.len() - 6) / 3;
        let s = RobotState {
            position: [values[0], values[1]],
            heading: values[2],
            body_velocity: [values[3], values[4]],
            yaw_rate: values[5],
            joint_pos: values[6..6 + j].to_vec(),
            joint_vel: values[6 + j..6 + 2 * j].to_vec(),
            prev_action: values[6 + 2 * j..6 + 3 * j].to_vec(),
        };
        if !s.is_finite() {
            return Err(Error::NonFinite("robot state".into()));
        }
        Ok(s)
    }
}

/// Frame-invariant sensor view of a state: body velocity, yaw rate, joint
/// positions and velocities. Length 2J + 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub values: Vec<f64>,
}

impl Observation {
    pub fn dim(num_joints: usize) -> usize {
        2 * num_joints + 3
    }
}

/// Target joint angles; clamped to [-pi/2, pi/2] before use by the PD loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub target_joint_pos: Vec<f64>,
}

impl Action {
    pub fn zeros(num_joints: usize) -> Self {
        Action { target_joint_pos: vec![0.0; num_joints] }
    }

    pub fn clamped(&self) -> Vec<f64> {
        self.target_joint_pos
            .iter()
            .map(|a| a.clamp(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2))
            .collect()
    }
}

/// Sign of the lateral coupling for joint `i`.
pub fn lateral_sign(i: usize) -> f64 {
    if i % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Sign of the yaw coupling for joint `i`.
pub fn yaw_sign(i: usize, num_joints: usize) -> f64 {
    if i < num_joints / 2 {
        1.0
    } else {
        -1.0
    }
}

pub fn observe(state: &RobotState) -> Observation {
    let mut values = Vec::with_capacity(Observation::dim(state.num_joints()));
    values.extend_from_slice(&state.body_velocity);
    values.push(state.yaw_rate);
    values.extend_from_slice(&state.joint_pos);
    values.extend_from_slice(&state.joint_vel);
    Observation { values }
}

/// Advance the surrogate one control period.
pub fn step(state: &RobotState, action: &Action, params: &PhysicalParams) -> Result<RobotState> {
    if !state.is_finite() {
        return Err(Error::NonFinite("step input state".into()));
    }
    if !action.target_joint_pos.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("step input action".into()));
    }
    let j = state.num_joints();
    if action.target_joint_pos.len() != j {
        return Err(Error::ShapeMismatch {
            context: "step action".into(),
            expected: vec![j],
            got: vec![action.target_joint_pos.len()],
        });
    }

    let a = action.clamped();
    let lambda = params.latency_blend();
    let kd = params.kd();
    let inertia = params.joint_inertia();

    let mut joint_pos = state.joint_pos.clone();
    let mut joint_vel = state.joint_vel.clone();
    for i in 0..j {
        let a_eff = (1.0 - lambda) * a[i] + lambda * state.prev_action[i];
        let torque = (params.kp * (a_eff - joint_pos[i]) - kd * joint_vel[i])
            .clamp(-params.max_torque, params.max_torque);
        joint_vel[i] += torque / inertia * DT;
        joint_pos[i] += joint_vel[i] * DT;
    }

    let mut target = [0.0; 3];
    for i in 0..j {
        target[0] += W_FORWARD * joint_vel[i].abs() * joint_pos[i].cos();
        target[1] += W_LATERAL * lateral_sign(i) * joint_pos[i];
        target[2] += W_YAW * yaw_sign(i, j) * joint_pos[i];
    }

    let rate = DT / params.twist_time_constant();
    let vx = state.body_velocity[0] + (target[0] - state.body_velocity[0]) * rate;
    let vy = state.body_velocity[1] + (target[1] - state.body_velocity[1]) * rate;
    let wz = state.yaw_rate + (target[2] - state.yaw_rate) * rate;

    let heading = wrap_angle(state.heading + wz * DT);
    let (sin_h, cos_h) = heading.sin_cos();
    let next = RobotState {
        position: [
            state.position[0] + (cos_h * vx - sin_h * vy) * DT,
            state.position[1] + (sin_h * vx + cos_h * vy) * DT,
        ],
        heading,
        body_velocity: [vx, vy],
        yaw_rate: wz,
        joint_pos,
        joint_vel,
        prev_action: a,
    };
    if !next.is_finite() {
        return Err(Error::NonFinite("step output state".into()));
    }
    Ok(next)
}

/// States and actions produced by `rollout`. `states` has one more entry than
/// `actions`; `truncated` marks a rollout cut short by non-finite dynamics.
#[derive(Debug, Clone)]
pub struct RolloutOutput {
    pub states: Vec<RobotState>,
    pub actions: Vec<Action>,
    pub truncated: bool,
}

/// Roll the surrogate forward under a policy closure. The closure sees the
/// step index, current state and observation.
pub fn rollout(
    initial: &RobotState,
    params: &PhysicalParams,
    steps: usize,
    mut policy: impl FnMut(usize, &RobotState, &Observation) -> Action,
) -> Result<RolloutOutput> {
    if steps == 0 {
        return Err(Error::InvalidArgument("rollout needs steps >= 1".into()));
    }
    let mut states = Vec::with_capacity(steps + 1);
    let mut actions = Vec::with_capacity(steps);
    states.push(initial.clone());
    let mut truncated = false;
    for k in 0..steps {
        let current = states.last().unwrap();
        let obs = observe(current);
        let action = policy(k, current, &obs);
        match step(current, &action, params) {
            Ok(next) => {
                actions.push(action);
                states.push(next);
            }
            Err(Error::NonFinite(_)) => {
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(RolloutOutput { states, actions, truncated })
}

/// Open-loop scripted gait: a speed-scaled traveling sine over the joints
/// plus a left/right posture skew for turning. The amplitude map is
/// calibrated so a clip's nominal speed tag roughly matches its realized
/// forward speed at Original params.
pub fn scripted_gait_action(t: f64, speed: f64, turn: f64, num_joints: usize) -> Action {
    let f = 1.0 + speed;
    let amplitude = (0.55 * speed).min(1.2);
    let target = (0..num_joints)
        .map(|i| {
            let phase = std::f64::consts::PI * i as f64 / num_joints as f64;
            amplitude * (std::f64::consts::TAU * f * t + phase).sin()
                + 0.5 * turn * yaw_sign(i, num_joints)
        })
        .collect();
    Action { target_joint_pos: target }
}

/// Ordered state sequence at 50 Hz with a nominal speed tag.
#[derive(Debug, Clone)]
pub struct ReferenceClip {
    pub dt: f64,
    pub speed: f64,
    pub frames: Vec<RobotState>,
}

impl ReferenceClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Roll out the scripted gait at Original params from rest and record every
/// post-step state; `duration * 50` frames.
pub fn scripted_gait_reference(
    speed: f64,
    turn: f64,
    duration: f64,
    params: &PhysicalParams,
    num_joints: usize,
) -> Result<ReferenceClip> {
    if !(0.0..=1.5).contains(&speed) {
        return Err(Error::InvalidArgument(format!("speed {speed} outside [0, 1.5]")));
    }
    if turn.abs() > 1.5 {
        return Err(Error::InvalidArgument(format!("turn {turn} outside [-1.5, 1.5]")));
    }
    let steps = (duration / DT).round() as usize;
    if steps == 0 {
        return Err(Error::InvalidArgument("duration too short for one frame".into()));
    }
    let out = rollout(&RobotState::zero(num_joints), params, steps, |k, _, _| {
        scripted_gait_action(k as f64 * DT, speed, turn, num_joints)
    })?;
    if out.truncated {
        return Err(Error::NonFinite("scripted gait rollout".into()));
    }
    Ok(ReferenceClip { dt: DT, speed, frames: out.states[1..].to_vec() })
}

/// On-disk clip document: `{dt, speed, frames: [[fields...]]}` with the
/// fields of each frame in `RobotState` declaration order.
#[derive(Debug, Serialize, Deserialize)]
pub struct ClipDoc {
    pub dt: f64,
    pub speed: f64,
    pub frames: Vec<Vec<f64>>,
}

impl ReferenceClip {
    pub fn to_doc(&self) -> ClipDoc {
        ClipDoc {
            dt: self.dt,
            speed: self.speed,
            frames: self.frames.iter().map(|f| f.flat()).collect(),
        }
    }

    pub fn from_doc(doc: &ClipDoc) -> Result<Self> {
        if doc.frames.is_empty() {
            return Err(Error::InvalidArgument("clip has no frames".into()));
        }
        let frames: Result<Vec<RobotState>> =
            doc.frames.iter().map(|f| RobotState::from_flat(f)).collect();
        let frames = frames?;
        let j = frames[0].num_joints();
        for (k, f) in frames.iter().enumerate() {
            if f.num_joints() != j {
                return Err(Error::InvalidArgument(format!(
                    "clip frame {k} has {} joints, expected {j}",
                    f.num_joints()
                )));
            }
        }
        // consecutive frames must be consistent with the clip dt: the pose of
        // each frame follows from the previous pose and the frame's own twist
        for k in 1..frames.len() {
            let prev = &frames[k - 1];
            let cur = &frames[k];
            let h_expect = wrap_angle(prev.heading + cur.yaw_rate * doc.dt);
            if wrap_angle(cur.heading - h_expect).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "clip frame {k} heading inconsistent with dt={}",
                    doc.dt
                )));
            }
            let (sin_h, cos_h) = cur.heading.sin_cos();
            let wx = cos_h * cur.body_velocity[0] - sin_h * cur.body_velocity[1];
            let wy = sin_h * cur.body_velocity[0] + cos_h * cur.body_velocity[1];
            let px = prev.position[0] + wx * doc.dt;
            let py = prev.position[1] + wy * doc.dt;
            if (cur.position[0] - px).abs() > 1e-6 || (cur.position[1] - py).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "clip frame {k} position inconsistent with dt={}",
                    doc.dt
                )));
            }
        }
        Ok(ReferenceClip { dt: doc.dt, speed: doc.speed, frames })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_doc())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ClipDoc = serde_json::from_str(text)?;
        Self::from_doc(&doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_state_zero_action_is_a_fixed_point() {
        let s = RobotState::zero(DEFAULT_JOINTS);
        let next = step(&s, &Action::zeros(DEFAULT_JOINTS), &PhysicalParams::original()).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn pd_torque_clamps_at_max() {
        // joint error of 1 rad at rest: raw PD torque 50 clamps to 18
        let p = PhysicalParams::original();
        let s = RobotState::zero(DEFAULT_JOINTS);
        let mut a = Action::zeros(DEFAULT_JOINTS);
        a.target_joint_pos[0] = 1.0;
        let next = step(&s, &a, &p).unwrap();
        let expected_dv = p.max_torque / p.joint_inertia() * DT;
        assert!((next.joint_vel[0] - expected_dv).abs() < 1e-12);
    }

    #[test]
    fn doubling_mass_halves_accel_and_twist_rate() {
        let p1 = PhysicalParams::original();
        let p2 = PhysicalParams { mass: 2.0 * 5.74, ..p1 };

        // joint acceleration halves for the same (state, action)
        let s = RobotState::zero(DEFAULT_JOINTS);
        let mut a = Action::zeros(DEFAULT_JOINTS);
        a.target_joint_pos[0] = 0.3; // torque 15, below the clamp
        let n1 = step(&s, &a, &p1).unwrap();
        let n2 = step(&s, &a, &p2).unwrap();
        assert!((n2.joint_vel[0] / n1.joint_vel[0] - 0.5).abs() < 1e-12);

        // twist relaxation rate halves: from pure twist with zero joints,
        // u' = u * (1 - dt / tau_b)
        let mut st = RobotState::zero(DEFAULT_JOINTS);
        st.body_velocity = [1.0, -0.5];
        st.yaw_rate = 0.4;
        let t1 = step(&st, &Action::zeros(DEFAULT_JOINTS), &p1).unwrap();
        let t2 = step(&st, &Action::zeros(DEFAULT_JOINTS), &p2).unwrap();
        let decay1 = 1.0 - t1.body_velocity[0] / st.body_velocity[0];
        let decay2 = 1.0 - t2.body_velocity[0] / st.body_velocity[0];
        assert!((decay2 / decay1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_latency_and_constant_action_ignore_the_blend() {
        let mut s = RobotState::zero(DEFAULT_JOINTS);
        s.prev_action = vec![0.2; DEFAULT_JOINTS];
        let a = Action { target_joint_pos: vec![0.2; DEFAULT_JOINTS] };
        let p0 = PhysicalParams { control_latency_ms: 0.0, ..PhysicalParams::original() };
        let p6 = PhysicalParams { control_latency_ms: 6.0, ..PhysicalParams::original() };
        let n0 = step(&s, &a, &p0).unwrap();
        let n6 = step(&s, &a, &p6).unwrap();
        assert_eq!(n0, n6);
    }

    #[test]
    fn joint_velocity_decays_at_original_params() {
        let mut s = RobotState::zero(DEFAULT_JOINTS);
        for (i, v) in s.joint_vel.iter_mut().enumerate() {
            *v = -4.0 + i as f64;
        }
        s.body_velocity = [0.5, 0.2];
        s.yaw_rate = 0.3;
        let p = PhysicalParams::original();
        let mut prev_mag = f64::INFINITY;
        for k in 0..150 {
            s = step(&s, &Action::zeros(DEFAULT_JOINTS), &p).unwrap();
            let mag = s.joint_vel.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(mag <= prev_mag + 1e-12, "|jv| rose at step {k}: {mag} > {prev_mag}");
            prev_mag = mag;
        }
        assert!(prev_mag < 1e-6);
        let u = s.body_velocity[0].abs().max(s.body_velocity[1].abs()).max(s.yaw_rate.abs());
        assert!(u < 1e-6, "twist failed to decay: {u}");
    }

    #[test]
    fn all_table_envs_settle_from_velocity_perturbation() {
        for p in [
            PhysicalParams::original(),
            PhysicalParams::env1(),
            PhysicalParams::env2(),
            PhysicalParams::env3(),
            PhysicalParams::env4(),
        ] {
            let mut s = RobotState::zero(DEFAULT_JOINTS);
            s.joint_vel = vec![3.0; DEFAULT_JOINTS];
            s.body_velocity = [1.0, 0.3];
            for _ in 0..200 {
                s = step(&s, &Action::zeros(DEFAULT_JOINTS), &p).unwrap();
            }
            let jv = s.joint_vel.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(jv < 1e-3, "jv {jv} did not settle for {p:?}");
            assert!(s.body_velocity[0].abs() < 1e-3);
        }
    }

    #[test]
    fn torque_clamp_bounds_joint_acceleration() {
        let p = PhysicalParams::env1();
        let bound = p.max_torque / p.joint_inertia() * DT + 1e-12;
        let mut s = RobotState::zero(DEFAULT_JOINTS);
        s.joint_pos = vec![1.2; DEFAULT_JOINTS];
        s.joint_vel = vec![-6.0; DEFAULT_JOINTS];
        let mut a = Action::zeros(DEFAULT_JOINTS);
        a.target_joint_pos = vec![-1.5; DEFAULT_JOINTS];
        let n = step(&s, &a, &p).unwrap();
        for i in 0..DEFAULT_JOINTS {
            assert!((n.joint_vel[i] - s.joint_vel[i]).abs() <= bound);
        }
    }

    #[test]
    fn observation_excludes_world_pose() {
        let mut a = RobotState::zero(DEFAULT_JOINTS);
        a.body_velocity = [0.4, -0.1];
        a.yaw_rate = 0.7;
        a.joint_pos = (0..DEFAULT_JOINTS).map(|i| 0.1 * i as f64).collect();
        a.joint_vel = (0..DEFAULT_JOINTS).map(|i| -0.2 * i as f64).collect();
        let mut b = a.clone();
        b.position = [12.0, -3.0];
        b.heading = 2.1;
        assert_eq!(observe(&a), observe(&b));

        let o = observe(&a);
        assert_eq!(o.values[0..2], a.body_velocity);
        assert_eq!(o.values[2], a.yaw_rate);
        assert_eq!(&o.values[3..3 + DEFAULT_JOINTS], a.joint_pos.as_slice());
        assert_eq!(&o.values[3 + DEFAULT_JOINTS..], a.joint_vel.as_slice());
    }

    #[test]
    fn rollout_is_deterministic_and_sized() {
        let p = PhysicalParams::original();
        let run = || {
            rollout(&RobotState::zero(DEFAULT_JOINTS), &p, 200, |k, _, _| {
                scripted_gait_action(k as f64 * DT, 0.9, 0.3, DEFAULT_JOINTS)
            })
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.states.len(), 201);
        assert_eq!(a.actions.len(), 200);
        assert!(!a.truncated);
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn zero_policy_from_zero_state_stays_zero() {
        let p = PhysicalParams::original();
        let out = rollout(&RobotState::zero(DEFAULT_JOINTS), &p, 50, |_, _, _| {
            Action::zeros(DEFAULT_JOINTS)
        })
        .unwrap();
        let zero = RobotState::zero(DEFAULT_JOINTS);
        assert!(out.states.iter().all(|s| *s == zero));
    }

    #[test]
    fn scripted_clip_frame_count_and_stationarity() {
        let p = PhysicalParams::original();
        let clip = scripted_gait_reference(0.0, 0.0, 10.0, &p, DEFAULT_JOINTS).unwrap();
        assert_eq!(clip.len(), 500);
        let last = clip.frames.last().unwrap();
        let disp = (last.position[0].powi(2) + last.position[1].powi(2)).sqrt();
        assert!(disp < 1e-12, "zero-speed clip moved {disp} m");
    }

    #[test]
    fn scripted_clip_speed_is_monotone() {
        let p = PhysicalParams::original();
        let mean_vx = |speed: f64| {
            let clip = scripted_gait_reference(speed, 0.0, 10.0, &p, DEFAULT_JOINTS).unwrap();
            let tail = &clip.frames[100..];
            tail.iter().map(|f| f.body_velocity[0]).sum::<f64>() / tail.len() as f64
        };
        let v06 = mean_vx(0.6);
        let v12 = mean_vx(1.2);
        assert!(v06 > 0.1, "clip(0.6) mean vx = {v06}");
        assert!(v12 > v06 + 0.1, "not monotone: {v12} vs {v06}");
    }

    #[test]
    fn scripted_turn_produces_matching_yaw() {
        let p = PhysicalParams::original();
        let clip = scripted_gait_reference(0.6, 1.0, 8.0, &p, DEFAULT_JOINTS).unwrap();
        let tail = &clip.frames[100..];
        let wz = tail.iter().map(|f| f.yaw_rate).sum::<f64>() / tail.len() as f64;
        assert!(wz > 0.1, "turn clip yaw rate {wz}");
    }

    mod equivariance {
        use super::*;
        use crate::autodiff::wrap_angle;
        use proptest::prelude::*;

        fn transform(s: &RobotState, angle: f64, shift: [f64; 2]) -> RobotState {
            let (sn, cs) = angle.sin_cos();
            let mut t = s.clone();
            t.position = [
                cs * s.position[0] - sn * s.position[1] + shift[0],
                sn * s.position[0] + cs * s.position[1] + shift[1],
            ];
            t.heading = wrap_angle(s.heading + angle);
            t
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn step_commutes_with_rigid_transforms(
                angle in -3.0f64..3.0,
                sx in -5.0f64..5.0,
                sy in -5.0f64..5.0,
                heading in -3.0f64..3.0,
                vx in -1.0f64..1.0,
                wz in -1.0f64..1.0,
                jseed in 0u64..1000,
            ) {
                let mut s = RobotState::zero(DEFAULT_JOINTS);
                s.heading = heading;
                s.body_velocity = [vx, 0.3 * wz];
                s.yaw_rate = wz;
                for i in 0..DEFAULT_JOINTS {
                    s.joint_pos[i] = ((jseed + i as u64) as f64 * 0.77).sin();
                    s.joint_vel[i] = ((jseed + i as u64) as f64 * 1.31).cos() * 2.0;
                }
                let a = Action {
                    target_joint_pos: (0..DEFAULT_JOINTS)
                        .map(|i| ((jseed + i as u64) as f64 * 0.41).sin() * 0.8)
                        .collect(),
                };
                let p = PhysicalParams::env2();
                let direct = transform(&step(&s, &a, &p).unwrap(), angle, [sx, sy]);
                let moved = step(&transform(&s, angle, [sx, sy]), &a, &p).unwrap();
                prop_assert!((direct.position[0] - moved.position[0]).abs() < 1e-9);
                prop_assert!((direct.position[1] - moved.position[1]).abs() < 1e-9);
                prop_assert!(wrap_angle(direct.heading - moved.heading).abs() < 1e-9);
                for i in 0..DEFAULT_JOINTS {
                    prop_assert!((direct.joint_vel[i] - moved.joint_vel[i]).abs() < 1e-12);
                }
                prop_assert!((direct.body_velocity[0] - moved.body_velocity[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clip_json_round_trip_and_validation() {
        let p = PhysicalParams::original();
        let clip = scripted_gait_reference(0.9, -0.5, 2.0, &p, DEFAULT_JOINTS).unwrap();
        let json = clip.to_json().unwrap();
        let parsed = ReferenceClip::from_json(&json).unwrap();
        assert_eq!(parsed.frames, clip.frames);
        assert_eq!(parsed.speed, clip.speed);

        // corrupt one frame's heading: the dt-consistency check trips
        let mut doc = clip.to_doc();
        doc.frames[10][2] += 0.5;
        let err = ReferenceClip::from_doc(&doc).unwrap_err();
        assert!(err.to_string().contains("inconsistent"), "{err}");
    }

    #[test]
    fn rollout_truncates_on_non_finite_action() {
        let p = PhysicalParams::original();
        let out = rollout(&RobotState::zero(DEFAULT_JOINTS), &p, 50, |k, _, _| {
            let mut a = Action::zeros(DEFAULT_JOINTS);
            if k == 5 {
                a.target_joint_pos[0] = f64::NAN;
            }
            a
        })
        .unwrap();
        assert!(out.truncated);
        assert_eq!(out.actions.len(), 5);
        assert_eq!(out.states.len(), 6);
    }

    #[test]
    fn out_of_range_gait_inputs_are_rejected() {
        let p = PhysicalParams::original();
        assert!(scripted_gait_reference(2.0, 0.0, 1.0, &p, 8).is_err());
        assert!(scripted_gait_reference(0.5, 2.0, 1.0, &p, 8).is_err());
    }
}
