//! Finite-difference verification suite: per-op checks of the autodiff
//! engine plus end-to-end checks of every training loss through multi-step
//! world-model unrolls, all on small network sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{finite_difference_check, GradCheckReport, ParamStore, Tensor};
use crate::envsim::{self, PhysicalParams, RobotState};
use crate::error::Result;
use crate::replay::Segment;
use crate::vaepolicy::{
    anchor_clip_frames, cf_policy_loss_tape, draw_step_noise, mt_policy_loss_tape, CfBatchItem,
    CfTrainables, Command, MtBatchItem, MtTrainables, PolicyConfig, PolicyNets,
};
use crate::worldmodel::{NormStats, WorldModel};

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

const SUITE_JOINTS: usize = 4;

/// One named check in the suite.
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

fn rand_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Gradient checks for every differentiable op kind on randomized inputs
/// in [-1, 1].
pub fn op_gradient_checks(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let p = rand_tensor(&mut rng, vec![2, 3]);
    let q = rand_tensor(&mut rng, vec![2, 3]);
    let w = rand_tensor(&mut rng, vec![4, 3]);
    let b = rand_tensor(&mut rng, vec![4]);
    let x = rand_tensor(&mut rng, vec![2, 3]);

    let mut store = ParamStore::new();
    store.insert("p", p);
    store.insert("q", q);
    store.insert("w", w);
    store.insert("b", b);

    type Builder = Box<
        dyn Fn(
            &ParamStore,
            &mut crate::autodiff::Tape,
        ) -> Result<crate::autodiff::Var>,
    >;
    let x2 = x.clone();
    let x3 = x.clone();
    let cases: Vec<(&str, Builder)> = vec![
        ("add", Box::new(|s, t| {
            let a = t.param(s, "p");
            let b = t.param(s, "q");
            let y = t.add(a, b);
            Ok(t.sum_all(y))
        })),
        ("sub", Box::new(|s, t| {
            let a = t.param(s, "p");
            let b = t.param(s, "q");
            let y = t.sub(a, b);
            let y2 = t.square(y);
            Ok(t.sum_all(y2))
        })),
        ("mul", Box::new(|s, t| {
            let a = t.param(s, "p");
            let b = t.param(s, "q");
            let y = t.mul(a, b);
            Ok(t.sum_all(y))
        })),
        ("affine", Box::new(|s, t| {
            let a = t.param(s, "p");
            let y = t.affine(a, -1.7, 0.4);
            let y2 = t.square(y);
            Ok(t.sum_all(y2))
        })),
        ("elu", Box::new(|s, t| {
            let a = t.param(s, "p");
            let y = t.elu(a);
            Ok(t.sum_all(y))
        })),
        ("tanh", Box::new(|s, t| {
            let a = t.param(s, "p");
            let y = t.tanh(a);
            let y2 = t.square(y);
            Ok(t.sum_all(y2))
        })),
        ("exp", Box::new(|s, t| {
            let a = t.param(s, "p");
            let y = t.exp(a);
            Ok(t.sum_all(y))
        })),
        ("abs", Box::new(|s, t| {
            let a = t.param(s, "p");
            let y = t.abs(a);
            Ok(t.sum_all(y))
        })),
        ("sin", Box::new(|s, t| {
            let a = t.param(s, "p");
            let y = t.sin(a);
            Ok(t.sum_all(y))
        })),
        ("cos", Box::new(|s, t| {
            let a = t.param(s, "p");
            let y = t.cos(a);
            Ok(t.sum_all(y))
        })),
        ("square", Box::new(|s, t| {
            let a = t.param(s, "p");
            let y = t.square(a);
            Ok(t.sum_all(y))
        })),
        ("clamp_sym", Box::new(|s, t| {
            let a = t.param(s, "p");
            let y = t.clamp_sym(a, 0.8);
            let y2 = t.square(y);
            Ok(t.sum_all(y2))
        })),
        ("wrap_angle", Box::new(|s, t| {
            let a = t.param(s, "p");
            let y = t.wrap_angle(a);
            let y2 = t.square(y);
            Ok(t.sum_all(y2))
        })),
        ("linear", Box::new(move |s, t| {
            let w = t.param(s, "w");
            let b = t.param(s, "b");
            let xv = t.constant(x2.clone());
            let y = t.linear(xv, w, b);
            let y2 = t.square(y);
            Ok(t.sum_all(y2))
        })),
        ("concat_slice", Box::new(|s, t| {
            let a = t.param(s, "p");
            let b = t.param(s, "q");
            let c = t.concat_cols(&[a, b]);
            let sl = t.slice_cols(c, 1, 5);
            let y = t.square(sl);
            Ok(t.sum_all(y))
        })),
        ("row_sum", Box::new(|s, t| {
            let a = t.param(s, "p");
            let r = t.row_sum(a);
            let y = t.square(r);
            Ok(t.sum_all(y))
        })),
        ("row_norm", Box::new(|s, t| {
            let a = t.param(s, "p");
            let r = t.row_norm(a);
            Ok(t.sum_all(r))
        })),
        ("mean_all", Box::new(move |s, t| {
            let a = t.param(s, "p");
            let xv = t.constant(x3.clone());
            let y = t.mul(a, xv);
            Ok(t.mean_all(y))
        })),
    ];

    for (name, build) in cases {
        let report = finite_difference_check(&store, FD_EPS, FD_TOL, |s, t| build(s, t))?;
        out.push(SuiteEntry { name: format!("op/{name}"), report });
    }
    Ok(out)
}

fn suite_segments(rng: &mut impl Rng, count: usize, horizon: usize) -> Result<Vec<Segment>> {
    let params = PhysicalParams::original();
    let mut segments = Vec::with_capacity(count);
    for _ in 0..count {
        let speed = rng.random_range(0.3..1.4);
        let warm = rng.random_range(5..40);
        let out = envsim::rollout(
            &RobotState::zero(SUITE_JOINTS),
            &params,
            warm + horizon,
            |k, _, _| {
                let mut a = envsim::scripted_gait_action(
                    k as f64 * envsim::DT,
                    speed,
                    0.0,
                    SUITE_JOINTS,
                );
                for v in &mut a.target_joint_pos {
                    *v += 0.05;
                }
                a
            },
        )?;
        segments.push(Segment {
            states: out.states[warm..=warm + horizon].to_vec(),
            actions: out.actions[warm..warm + horizon].to_vec(),
        });
    }
    Ok(segments)
}

fn randomize_prefixed(store: &mut ParamStore, prefix: &str, scale: f64, rng: &mut impl Rng) {
    let names: Vec<String> =
        store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
    for name in names {
        for v in &mut store.get_mut(&name).unwrap().data {
            if *v == 0.0 {
                *v = rng.random_range(-scale..scale);
            }
        }
    }
}

/// Prediction-loss gradients vs finite differences at the given unroll
/// length.
pub fn prediction_loss_check(seed: u64, horizon: usize) -> Result<SuiteEntry> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(horizon as u64));
    let wm = WorldModel::new(SUITE_JOINTS, &[12]);
    let mut store = ParamStore::new();
    wm.init_params(&mut store, &mut rng);
    randomize_prefixed(&mut store, "wm/", 0.1, &mut rng);
    let norm = NormStats::identity(SUITE_JOINTS);
    let segments = suite_segments(&mut rng, 2, horizon)?;
    let report = finite_difference_check(&store, FD_EPS, FD_TOL, |s, t| {
        wm.prediction_loss_tape(t, s, &norm, &segments, true)
    })?;
    Ok(SuiteEntry { name: format!("prediction_loss/n{horizon}"), report })
}

fn suite_policy(seed: u64) -> (PolicyNets, WorldModel, ParamStore, NormStats, ChaCha12Rng) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let cfg = PolicyConfig {
        num_joints: SUITE_JOINTS,
        z_dim: 3,
        window: 2,
        sigma: 0.3,
        hidden: vec![10],
    };
    let nets = PolicyNets::new(cfg);
    let wm = WorldModel::new(SUITE_JOINTS, &[12]);
    let mut store = ParamStore::new();
    nets.init_params(&mut store, &mut rng);
    wm.init_params(&mut store, &mut rng);
    for prefix in ["prior/", "enc_mt/", "enc_cf/", "dec/", "wm/"] {
        randomize_prefixed(&mut store, prefix, 0.1, &mut rng);
    }
    (nets, wm, store, NormStats::identity(SUITE_JOINTS), rng)
}

/// Motion-tracking policy-loss gradients vs finite differences.
pub fn mt_loss_check(seed: u64, horizon: usize) -> Result<SuiteEntry> {
    let (nets, wm, store, norm, mut rng) = suite_policy(seed);
    let params = PhysicalParams::original();
    let clip = envsim::scripted_gait_reference(0.9, 0.4, 2.0, &params, SUITE_JOINTS)?;
    let need = horizon + nets.cfg.window;
    let mut items = Vec::new();
    for _ in 0..2 {
        let frame = rng.random_range(10..clip.len() - need - 1);
        let mut start = clip.frames[frame].clone();
        start.position[0] += rng.random_range(-0.05..0.05);
        start.heading += rng.random_range(-0.1..0.1);
        let anchored = anchor_clip_frames(&clip, frame, &start, need)?;
        items.push(MtBatchItem { start, anchored });
    }
    let noise = draw_step_noise(items.len(), nets.cfg.z_dim, nets.cfg.sigma, horizon, &mut rng);
    let report = finite_difference_check(&store, FD_EPS, FD_TOL, |s, t| {
        let (loss, _) = mt_policy_loss_tape(
            t,
            s,
            &wm,
            &nets,
            &norm,
            &items,
            horizon,
            &noise,
            MtTrainables::scratch(),
        )?;
        Ok(loss)
    })?;
    Ok(SuiteEntry { name: format!("mt_policy_loss/n{horizon}"), report })
}

/// Command-following-plus-regularizer gradients vs finite differences, with
/// the fine-tune trainable set (command encoder and motor decoder).
pub fn cf_loss_check(seed: u64, horizon: usize) -> Result<SuiteEntry> {
    let (nets, wm, mut store, norm, mut rng) = suite_policy(seed);
    nets.snapshot_decoder(&mut store);
    // drift the live decoder so the regularizer has signal
    randomize_prefixed(&mut store, "dec/", 0.02, &mut rng);
    let bias = nets.decoder.bias_name(nets.decoder.num_layers() - 1);
    for v in &mut store.get_mut(&bias).unwrap().data {
        *v += rng.random_range(-0.05..0.05);
    }
    let params = PhysicalParams::original();
    let mut items = Vec::new();
    for _ in 0..2 {
        let speed = rng.random_range(0.3..1.2);
        let steps = rng.random_range(20..80);
        let out = envsim::rollout(&RobotState::zero(SUITE_JOINTS), &params, steps, |k, _, _| {
            envsim::scripted_gait_action(k as f64 * envsim::DT, speed, 0.0, SUITE_JOINTS)
        })?;
        items.push(CfBatchItem {
            start: out.states.last().unwrap().clone(),
            command: Command {
                linear: rng.random_range(0.0..1.5),
                angular: rng.random_range(-1.5..1.5),
            },
        });
    }
    let noise = draw_step_noise(items.len(), nets.cfg.z_dim, nets.cfg.sigma, horizon, &mut rng);
    let report = finite_difference_check(&store, FD_EPS, FD_TOL, |s, t| {
        let (loss, _) = cf_policy_loss_tape(
            t,
            s,
            &wm,
            &nets,
            &norm,
            &items,
            horizon,
            &noise,
            0.1,
            CfTrainables::finetune(),
        )?;
        Ok(loss)
    })?;
    Ok(SuiteEntry { name: format!("cf_reg_loss/n{horizon}"), report })
}

/// The full suite for one seed: all op checks, the prediction loss at
/// n in {1, 4, 8}, the tracking loss at n = 4, and the command loss with
/// regularizer at n = 4.
pub fn full_gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut entries = op_gradient_checks(seed)?;
    for n in [1, 4, 8] {
        entries.push(prediction_loss_check(seed, n)?);
    }
    entries.push(mt_loss_check(seed, 4)?);
    entries.push(cf_loss_check(seed, 4)?);
    Ok(entries)
}

/// Sanity check of an action whose gradient must also flow: d loss / d action
/// through a one-step world-model prediction, checked by finite differences
/// on a scalar action parameter.
pub fn action_gradient_check(seed: u64) -> Result<SuiteEntry> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let wm = WorldModel::new(SUITE_JOINTS, &[12]);
    let mut store = ParamStore::new();
    wm.init_params(&mut store, &mut rng);
    randomize_prefixed(&mut store, "wm/", 0.1, &mut rng);
    store.insert("probe_action", rand_tensor(&mut rng, vec![1, SUITE_JOINTS]));
    let norm = NormStats::identity(SUITE_JOINTS);
    let segments = suite_segments(&mut rng, 1, 1)?;
    let start = segments[0].states[0].clone();
    let target = segments[0].states[1].clone();
    let report = finite_difference_check(&store, FD_EPS, FD_TOL, |s, t| {
        let sv = crate::worldmodel::state_batch(t, &[&start]);
        let action = t.param(s, "probe_action");
        let next = wm.predict_tape(t, s, &norm, &sv, action, false)?;
        let tv = crate::worldmodel::state_batch(t, &[&target]);
        let dp = t.sub(next.pos, tv.pos);
        let dh_raw = t.sub(next.heading, tv.heading);
        let dh = t.wrap_angle(dh_raw);
        let dtw = t.sub(next.twist, tv.twist);
        let djp = t.sub(next.joint_pos, tv.joint_pos);
        let djv = t.sub(next.joint_vel, tv.joint_vel);
        let diff = t.concat_cols(&[dp, dh, dtw, djp, djv]);
        let n = t.row_norm(diff);
        Ok(t.mean_all(n))
    })?;
    Ok(SuiteEntry { name: "action_gradient".into(), report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_checks_pass() {
        for entry in op_gradient_checks(3).unwrap() {
            assert!(entry.report.passed(), "{}: {}", entry.name, entry.report.summary());
        }
    }

    #[test]
    fn prediction_loss_gradients_match_fd() {
        for n in [1, 4, 8] {
            let e = prediction_loss_check(11, n).unwrap();
            assert!(e.report.passed(), "{}: {}", e.name, e.report.summary());
        }
    }

    #[test]
    fn policy_loss_gradients_match_fd() {
        let e = mt_loss_check(17, 4).unwrap();
        assert!(e.report.passed(), "{}: {}", e.name, e.report.summary());
        let e = cf_loss_check(17, 4).unwrap();
        assert!(e.report.passed(), "{}: {}", e.name, e.report.summary());
    }

    #[test]
    fn action_gradients_flow_through_prediction() {
        let e = action_gradient_check(23).unwrap();
        assert!(e.report.passed(), "{}", e.report.summary());
        let probe = e.report.entries.iter().find(|x| x.name == "probe_action").unwrap();
        assert!(probe.near_zero_elements < probe.checked_elements, "action gradient is dead");
    }
}
