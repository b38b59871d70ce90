//! Trajectory storage and segment sampling for world-model and policy
//! updates. Segments never span trajectory boundaries; eviction is
//! oldest-first by whole trajectories.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envsim::{Action, RobotState};
use crate::error::{Error, Result};
use crate::vaepolicy::Command;

/// Reference pointer for motion-tracking data: which clip and frame a step
/// was tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefCursor {
    pub clip: usize,
    pub frame: usize,
}

/// One recorded environment transition (the state is the one the action was
/// taken from).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: RobotState,
    pub action: Vec<f64>,
    pub command: Option<Command>,
    pub reference: Option<RefCursor>,
}

/// An ordered episode: `steps.len()` transitions plus the final state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub final_state: RobotState,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// State at index `i` in `0..=len()`.
    pub fn state(&self, i: usize) -> &RobotState {
        if i < self.steps.len() {
            &self.steps[i].state
        } else {
            &self.final_state
        }
    }
}

/// Contiguous slice of a trajectory: `n` actions and `n + 1` states.
#[derive(Debug, Clone)]
pub struct Segment {
    pub states: Vec<RobotState>,
    pub actions: Vec<Action>,
}

impl Segment {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Ring buffer of trajectories with a transition-count capacity.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    trajectories: Vec<Trajectory>,
    capacity: usize,
    transitions: usize,
    inserted_total: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReplayBuffer { trajectories: Vec::new(), capacity, transitions: 0, inserted_total: 0 }
    }

    pub fn push(&mut self, traj: Trajectory) {
        if traj.is_empty() {
            return;
        }
        self.transitions += traj.len();
        self.inserted_total += traj.len();
        self.trajectories.push(traj);
        while self.transitions > self.capacity && self.trajectories.len() > 1 {
            let evicted = self.trajectories.remove(0);
            self.transitions -= evicted.len();
        }
    }

    pub fn num_transitions(&self) -> usize {
        self.transitions
    }

    pub fn total_inserted(&self) -> usize {
        self.inserted_total
    }

    pub fn num_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Number of distinct (trajectory, offset) segment starts of horizon `n`.
    pub fn num_segment_starts(&self, n: usize) -> usize {
        self.trajectories.iter().map(|t| t.len().saturating_sub(n - 1)).sum()
    }

    /// Sample a segment of `n` transitions uniformly over valid starts.
    pub fn sample_segment(&self, n: usize, rng: &mut impl Rng) -> Result<Segment> {
        let total = self.num_segment_starts(n);
        if total == 0 {
            return Err(Error::InsufficientData {
                context: format!("segment of length {n}"),
                needed: n,
                available: self.transitions,
            });
        }
        let mut pick = rng.random_range(0..total);
        for traj in &self.trajectories {
            let starts = traj.len().saturating_sub(n - 1);
            if pick < starts {
                let states = (pick..=pick + n).map(|i| traj.state(i).clone()).collect();
                let actions = (pick..pick + n)
                    .map(|i| Action { target_joint_pos: traj.steps[i].action.clone() })
                    .collect();
                return Ok(Segment { states, actions });
            }
            pick -= starts;
        }
        unreachable!("segment index out of range");
    }

    /// Sample a step uniformly over those with at least `min_followup`
    /// further transitions in the same trajectory.
    pub fn sample_step(
        &self,
        min_followup: usize,
        rng: &mut impl Rng,
    ) -> Result<(&Trajectory, usize)> {
        let total: usize =
            self.trajectories.iter().map(|t| t.len().saturating_sub(min_followup)).sum();
        if total == 0 {
            return Err(Error::InsufficientData {
                context: format!("step with {min_followup} follow-up transitions"),
                needed: min_followup + 1,
                available: self.transitions,
            });
        }
        let mut pick = rng.random_range(0..total);
        for traj in &self.trajectories {
            let starts = traj.len().saturating_sub(min_followup);
            if pick < starts {
                return Ok((traj, pick));
            }
            pick -= starts;
        }
        unreachable!("step index out of range");
    }
}

/// Serialize the buffer's trajectories for off-policy reuse.
pub fn buffer_to_json(buffer: &ReplayBuffer) -> Result<String> {
    Ok(serde_json::to_string(buffer.trajectories())?)
}

/// Rebuild a buffer from serialized trajectories.
pub fn buffer_from_json(text: &str, capacity: usize) -> Result<ReplayBuffer> {
    let trajectories: Vec<Trajectory> = serde_json::from_str(text)?;
    let mut buffer = ReplayBuffer::new(capacity);
    for t in trajectories {
        buffer.push(t);
    }
    Ok(buffer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::DEFAULT_JOINTS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn traj(len: usize, tag: f64) -> Trajectory {
        let mut steps = Vec::new();
        for i in 0..len {
            let mut s = RobotState::zero(DEFAULT_JOINTS);
            s.position[0] = tag;
            s.position[1] = i as f64;
            steps.push(StepRecord {
                state: s,
                action: vec![tag; DEFAULT_JOINTS],
                command: None,
                reference: None,
            });
        }
        let mut fin = RobotState::zero(DEFAULT_JOINTS);
        fin.position[0] = tag;
        fin.position[1] = len as f64;
        Trajectory { steps, final_state: fin }
    }

    #[test]
    fn segments_never_cross_trajectory_boundaries() {
        let mut buf = ReplayBuffer::new(10_000);
        buf.push(traj(20, 1.0));
        buf.push(traj(15, 2.0));
        buf.push(traj(8, 3.0));
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..500 {
            let seg = buf.sample_segment(5, &mut rng).unwrap();
            assert_eq!(seg.states.len(), 6);
            assert_eq!(seg.actions.len(), 5);
            let tag = seg.states[0].position[0];
            assert!(seg.states.iter().all(|s| s.position[0] == tag), "crossed boundary");
            for w in seg.states.windows(2) {
                assert!((w[1].position[1] - w[0].position[1] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_short_trajectories_yield_insufficient_data() {
        let mut buf = ReplayBuffer::new(100);
        buf.push(traj(3, 1.0));
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let err = buf.sample_segment(9, &mut rng).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { .. }));
    }

    #[test]
    fn eviction_is_oldest_first() {
        let mut buf = ReplayBuffer::new(30);
        buf.push(traj(20, 1.0));
        buf.push(traj(20, 2.0));
        assert_eq!(buf.num_trajectories(), 1);
        assert_eq!(buf.trajectories()[0].steps[0].state.position[0], 2.0);
        assert_eq!(buf.total_inserted(), 40);
    }

    #[test]
    fn sampling_is_uniform_over_starts() {
        let mut buf = ReplayBuffer::new(1000);
        buf.push(traj(12, 1.0)); // 10 starts at n = 3
        buf.push(traj(5, 2.0)); // 3 starts
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut short = 0;
        let n_draws = 20_000;
        for _ in 0..n_draws {
            let seg = buf.sample_segment(3, &mut rng).unwrap();
            if seg.states[0].position[0] == 2.0 {
                short += 1;
            }
        }
        let frac = short as f64 / n_draws as f64;
        assert!((frac - 3.0 / 13.0).abs() < 0.02, "frac = {frac}");
    }
}
