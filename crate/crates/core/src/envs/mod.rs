//! Deterministic multi-goal toy plants and the goal-conditioned reward.
//!
//! State layouts (native units):
//!
//! | plant            | state                                   | position | quaternion |
//! |------------------|-----------------------------------------|----------|------------|
//! | point_mass_reach | `[px, py, vx, vy]`                      | 0..2     | -          |
//! | two_link_arm     | `[θ1, θ2, tip_x, tip_y]`                | 2..4     | -          |
//! | free_rotor       | `[qw, qx, qy, qz, px, py]`              | 4..6     | 0..4       |
//! | identity         | `[x_0 .. x_n]` (never changes)          | -        | -          |

pub mod quat;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use quat::Quat;

/// Episode length shared by every preset.
pub const EPISODE_LEN: usize = 50;
/// Extra cost of a state whose object left the drop region.
pub const DROP_PENALTY: f64 = 2.0;
/// Weight of the position term when an orientation goal is present.
pub const POSITION_WEIGHT: f64 = 0.1;
/// Manipulation-analog position threshold (metres).
pub const MANIPULATION_POSITION_THRESHOLD: f64 = 0.005;
/// Orientation success threshold (radians).
pub const ORIENTATION_THRESHOLD: f64 = 0.5;
/// Reach-analog threshold, scaled up from a fingertip workspace to the toy
/// arenas, which are roughly ten times larger.
pub const REACH_POSITION_THRESHOLD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Plant {
    /// 2-D double integrator driven by acceleration.
    PointMassReach,
    /// Planar two-joint arm driven by joint velocity commands.
    TwoLinkArm { link_lengths: [f64; 2] },
    /// Rigid body with directly actuated angular velocity plus a planar
    /// position channel that drifts with the commanded rotation.
    FreeRotor { drift_gain: f64 },
    /// State never changes; used to test the pipeline itself.
    Identity { dim: usize, action_dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PositionGoals {
    Fixed {
        position: Vec<f64>,
    },
    /// Uniform over an axis-aligned box.
    Box {
        low: Vec<f64>,
        high: Vec<f64>,
    },
    /// Uniform joint angles mapped through the arm kinematics.
    Reachable {
        joint_low: [f64; 2],
        joint_high: [f64; 2],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OrientationGoals {
    /// Explicit list; the goal id is the index into it.
    Set { targets: Vec<Quat> },
    /// The 24 axis-aligned cube orientations.
    Cube,
    /// Uniform over SO(3).
    Continuous,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub position: Option<f64>,
    pub orientation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub id: u64,
    pub position: Option<Vec<f64>>,
    pub orientation: Option<Quat>,
    pub thresholds: Thresholds,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Dropped,
    Fault(String),
}

impl Termination {
    pub fn reason(&self) -> &str {
        match self {
            Termination::Dropped => "dropped",
            Termination::Fault(msg) => msg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub obs: Vec<f64>,
    pub step: usize,
    /// Number of actions clamped into bounds so far.
    pub clamps: usize,
    pub termination: Option<Termination>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub plant: Plant,
    pub dt: f64,
    pub episode_len: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub initial_state: Vec<f64>,
    pub position_goals: Option<PositionGoals>,
    pub orientation_goals: Option<OrientationGoals>,
    /// Object counts as dropped once its planar position leaves this radius.
    pub drop_radius: Option<f64>,
    pub thresholds: Thresholds,
}

/// Right-handed quarter turns used as the default die targets.
pub fn face_up_goals() -> Vec<Quat> {
    use std::f64::consts::FRAC_PI_2;
    vec![
        quat::from_axis_angle([1.0, 0.0, 0.0], FRAC_PI_2),
        quat::from_axis_angle([0.0, 1.0, 0.0], FRAC_PI_2),
        quat::from_axis_angle([1.0, 0.0, 0.0], -FRAC_PI_2),
    ]
}

fn arm_tip(lengths: [f64; 2], t1: f64, t2: f64) -> [f64; 2] {
    [
        lengths[0] * t1.cos() + lengths[1] * (t1 + t2).cos(),
        lengths[0] * t1.sin() + lengths[1] * (t1 + t2).sin(),
    ]
}

impl EnvSpec {
    pub fn point_mass_reach() -> Self {
        Self {
            name: "point_mass_reach".into(),
            plant: Plant::PointMassReach,
            dt: 0.05,
            episode_len: EPISODE_LEN,
            action_low: vec![-1.0; 2],
            action_high: vec![1.0; 2],
            initial_state: vec![0.0; 4],
            position_goals: Some(PositionGoals::Box {
                low: vec![-0.3; 2],
                high: vec![0.3; 2],
            }),
            orientation_goals: None,
            drop_radius: None,
            thresholds: Thresholds {
                position: Some(REACH_POSITION_THRESHOLD),
                orientation: None,
            },
        }
    }

    pub fn two_link_arm() -> Self {
        let lengths = [0.5, 0.5];
        let (t1, t2) = (0.5, 1.0);
        let tip = arm_tip(lengths, t1, t2);
        Self {
            name: "two_link_arm".into(),
            plant: Plant::TwoLinkArm { link_lengths: lengths },
            dt: 0.05,
            episode_len: EPISODE_LEN,
            action_low: vec![-1.0; 2],
            action_high: vec![1.0; 2],
            initial_state: vec![t1, t2, tip[0], tip[1]],
            position_goals: Some(PositionGoals::Reachable {
                joint_low: [0.0, 0.3],
                joint_high: [1.2, 1.8],
            }),
            orientation_goals: None,
            drop_radius: None,
            thresholds: Thresholds {
                position: Some(REACH_POSITION_THRESHOLD),
                orientation: None,
            },
        }
    }

    /// Die analog: orientation targets from the three face-up goals, position
    /// target at the origin (reward only), drop outside a 6 cm radius.
    pub fn free_rotor() -> Self {
        Self {
            name: "free_rotor".into(),
            plant: Plant::FreeRotor { drift_gain: 0.02 },
            dt: 0.1,
            episode_len: EPISODE_LEN,
            action_low: vec![-2.0; 3],
            action_high: vec![2.0; 3],
            initial_state: vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            position_goals: Some(PositionGoals::Fixed {
                position: vec![0.0, 0.0],
            }),
            orientation_goals: Some(OrientationGoals::Set {
                targets: face_up_goals(),
            }),
            drop_radius: Some(0.06),
            thresholds: Thresholds {
                position: None,
                orientation: Some(ORIENTATION_THRESHOLD),
            },
        }
    }

    pub fn identity(dim: usize, action_dim: usize) -> Self {
        Self {
            name: "identity".into(),
            plant: Plant::Identity { dim, action_dim },
            dt: 1.0,
            episode_len: EPISODE_LEN,
            action_low: vec![-1.0; action_dim],
            action_high: vec![1.0; action_dim],
            initial_state: vec![0.0; dim],
            position_goals: None,
            orientation_goals: None,
            drop_radius: None,
            thresholds: Thresholds::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "point_mass_reach" => Ok(Self::point_mass_reach()),
            "two_link_arm" => Ok(Self::two_link_arm()),
            "free_rotor" => Ok(Self::free_rotor()),
            "identity" => Ok(Self::identity(1, 1)),
            other => Err(Error::config(format!("unknown environment preset `{other}`"))),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.plant {
            Plant::PointMassReach | Plant::TwoLinkArm { .. } => 4,
            Plant::FreeRotor { .. } => 6,
            Plant::Identity { dim, .. } => dim,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self.plant {
            Plant::PointMassReach | Plant::TwoLinkArm { .. } => 2,
            Plant::FreeRotor { .. } => 3,
            Plant::Identity { action_dim, .. } => action_dim,
        }
    }

    /// Offsets of the object position inside the state vector.
    pub fn position_range(&self) -> Option<Range<usize>> {
        match self.plant {
            Plant::PointMassReach => Some(0..2),
            Plant::TwoLinkArm { .. } => Some(2..4),
            Plant::FreeRotor { .. } => Some(4..6),
            Plant::Identity { .. } => None,
        }
    }

    /// Offset of the `[w, x, y, z]` orientation inside the state vector.
    pub fn quaternion_offset(&self) -> Option<usize> {
        match self.plant {
            Plant::FreeRotor { .. } => Some(0),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ad = self.action_dim();
        if self.action_low.len() != ad || self.action_high.len() != ad {
            return Err(Error::config("action bounds do not match the action dimension"));
        }
        if self
            .action_low
            .iter()
            .zip(&self.action_high)
            .any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h))
        {
            return Err(Error::config("action bounds must be finite with low < high"));
        }
        if self.initial_state.len() != self.state_dim() {
            return Err(Error::config("initial state does not match the state dimension"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) || self.episode_len == 0 {
            return Err(Error::config("dt and episode length must be positive"));
        }
        if let Some(OrientationGoals::Set { targets }) = &self.orientation_goals {
            if targets.is_empty() || targets.iter().any(|q| (quat::norm(q) - 1.0).abs() > 1e-9) {
                return Err(Error::config("orientation targets must be unit quaternions"));
            }
        }
        Ok(())
    }

    pub fn reset(&self) -> EnvState {
        EnvState {
            obs: self.initial_state.clone(),
            step: 0,
            clamps: 0,
            termination: None,
        }
    }

    pub fn clamp_action(&self, action: &[f64]) -> (Vec<f64>, bool) {
        let mut clamped = false;
        let out = action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&l, &h))| {
                let c = a.clamp(l, h);
                clamped |= c != a;
                c
            })
            .collect();
        (out, clamped)
    }

    /// Advances the plant by one tick. Out-of-bounds actions are clamped and
    /// counted in [`EnvState::clamps`].
    pub fn step(&self, state: &EnvState, action: &[f64]) -> Result<EnvState> {
        if state.termination.is_some() {
            return Err(Error::Environment("step on a terminated episode".into()));
        }
        if action.len() != self.action_dim() {
            return Err(Error::shape(format!(
                "action has {} entries, plant expects {}",
                action.len(),
                self.action_dim()
            )));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Environment("non-finite action".into()));
        }
        let (a, clamped) = self.clamp_action(action);
        let s = &state.obs;
        let dt = self.dt;
        let mut termination = None;
        let obs = match &self.plant {
            Plant::PointMassReach => {
                let mut n = s.clone();
                for d in 0..2 {
                    n[d] = s[d] + s[d + 2] * dt + 0.5 * a[d] * dt * dt;
                    n[d + 2] = s[d + 2] + a[d] * dt;
                }
                n
            }
            Plant::TwoLinkArm { link_lengths } => {
                let t1 = s[0] + a[0] * dt;
                let t2 = s[1] + a[1] * dt;
                let tip = arm_tip(*link_lengths, t1, t2);
                vec![t1, t2, tip[0], tip[1]]
            }
            Plant::FreeRotor { drift_gain } => {
                let q = [s[0], s[1], s[2], s[3]];
                let half = [a[0] * dt / 2.0, a[1] * dt / 2.0, a[2] * dt / 2.0];
                let q = quat::normalize(&quat::mul(&q, &quat::exp_pure(half)))
                    .ok_or_else(|| Error::Environment("degenerate orientation".into()))?;
                let px = s[4] + dt * drift_gain * a[1];
                let py = s[5] - dt * drift_gain * a[0];
                if self.drop_radius.is_some_and(|r| px.hypot(py) > r) {
                    termination = Some(Termination::Dropped);
                }
                vec![q[0], q[1], q[2], q[3], px, py]
            }
            Plant::Identity { .. } => s.clone(),
        };
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Environment("non-finite state".into()));
        }
        Ok(EnvState {
            obs,
            step: state.step + 1,
            clamps: state.clamps + usize::from(clamped),
            termination,
        })
    }

    /// True when the state vector places the object outside the drop region.
    pub fn is_dropped(&self, obs: &[f64]) -> bool {
        match (self.drop_radius, self.position_range()) {
            (Some(r), Some(range)) => {
                let p = &obs[range];
                p.iter().map(|v| v * v).sum::<f64>().sqrt() > r
            }
            _ => false,
        }
    }

    fn orientation(&self, obs: &[f64]) -> Option<Option<Quat>> {
        self.quaternion_offset()
            .map(|o| quat::normalize(&[obs[o], obs[o + 1], obs[o + 2], obs[o + 3]]))
    }

    fn position_error(&self, obs: &[f64], goal: &Goal) -> Option<f64> {
        let target = goal.position.as_ref()?;
        let range = self.position_range()?;
        Some(
            obs[range]
                .iter()
                .zip(target)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                .sqrt(),
        )
    }

    /// Orientation error `2 arccos |<q, q*>|`; a degenerate predicted
    /// orientation counts as the worst case, π.
    fn orientation_error(&self, obs: &[f64], goal: &Goal) -> Option<f64> {
        let target = goal.orientation.as_ref()?;
        let q = self.orientation(obs)?;
        Some(q.map_or(std::f64::consts::PI, |q| quat::geodesic(&q, target)))
    }

    /// Goal-conditioned reward of a state vector:
    /// `-(0.1 ‖p − p*‖ + 2 arccos |<q, q*>|)` when both targets exist,
    /// `-‖p − p*‖` for position-only goals, minus the drop penalty when the
    /// object has left the drop region. Never positive.
    pub fn reward(&self, obs: &[f64], goal: &Goal) -> f64 {
        let orientation = self.orientation_error(obs, goal);
        let weight = if orientation.is_some() { POSITION_WEIGHT } else { 1.0 };
        let mut cost = orientation.unwrap_or(0.0);
        if let Some(e) = self.position_error(obs, goal) {
            cost += weight * e;
        }
        if self.is_dropped(obs) {
            cost += DROP_PENALTY;
        }
        -cost
    }

    /// Every applicable threshold holds strictly, and the object was not
    /// dropped.
    pub fn is_success(&self, obs: &[f64], goal: &Goal) -> bool {
        if self.is_dropped(obs) {
            return false;
        }
        if let (Some(th), Some(e)) = (goal.thresholds.position, self.position_error(obs, goal)) {
            if e >= th {
                return false;
            }
        }
        if let (Some(th), Some(e)) = (goal.thresholds.orientation, self.orientation_error(obs, goal)) {
            if e >= th {
                return false;
            }
        }
        true
    }

    pub fn sample_goal<R: Rng + ?Sized>(&self, rng: &mut R) -> Goal {
        let mut id = 0;
        let position = self.position_goals.as_ref().map(|g| match g {
            PositionGoals::Fixed { position } => position.clone(),
            PositionGoals::Box { low, high } => low.iter().zip(high).map(|(l, h)| rng.random_range(*l..=*h)).collect(),
            PositionGoals::Reachable { joint_low, joint_high } => {
                let lengths = match self.plant {
                    Plant::TwoLinkArm { link_lengths } => link_lengths,
                    _ => [0.5, 0.5],
                };
                let t1 = rng.random_range(joint_low[0]..=joint_high[0]);
                let t2 = rng.random_range(joint_low[1]..=joint_high[1]);
                arm_tip(lengths, t1, t2).to_vec()
            }
        });
        let orientation = self.orientation_goals.as_ref().map(|g| match g {
            OrientationGoals::Set { targets } => {
                let i = rng.random_range(0..targets.len());
                id = i as u64;
                targets[i]
            }
            OrientationGoals::Cube => {
                let set = quat::cube_rotations();
                let i = rng.random_range(0..set.len());
                id = i as u64;
                set[i]
            }
            OrientationGoals::Continuous => uniform_rotation(rng),
        });
        Goal {
            id,
            position,
            orientation,
            thresholds: self.thresholds,
        }
    }

    /// Goal with the `index`-th orientation of a discrete target set.
    pub fn goal_at(&self, index: usize) -> Result<Goal> {
        let targets = match &self.orientation_goals {
            Some(OrientationGoals::Set { targets }) => targets.clone(),
            Some(OrientationGoals::Cube) => quat::cube_rotations(),
            _ => return Err(Error::config("environment has no discrete orientation goals")),
        };
        let orientation = *targets
            .get(index)
            .ok_or_else(|| Error::config(format!("goal index {index} out of range")))?;
        let position = match &self.position_goals {
            Some(PositionGoals::Fixed { position }) => Some(position.clone()),
            Some(_) => return Err(Error::config("indexed goals need a fixed position target")),
            None => None,
        };
        Ok(Goal {
            id: index as u64,
            position,
            orientation: Some(orientation),
            thresholds: self.thresholds,
        })
    }

    /// Number of discrete goals, if the goal space is finite.
    pub fn discrete_goal_count(&self) -> Option<usize> {
        match &self.orientation_goals {
            Some(OrientationGoals::Set { targets }) => Some(targets.len()),
            Some(OrientationGoals::Cube) => Some(24),
            _ => None,
        }
    }

    /// Uniformly random action within bounds.
    pub fn random_action<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(l, h)| rng.random_range(*l..=*h))
            .collect()
    }
}

/// Uniformly distributed unit quaternion (subgroup algorithm).
pub fn uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> Quat {
    use std::f64::consts::TAU;
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    [
        b * (TAU * u3).cos(),
        a * (TAU * u2).sin(),
        a * (TAU * u2).cos(),
        b * (TAU * u3).sin(),
    ]
}
