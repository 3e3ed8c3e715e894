//! Desk-scale planar-arm environment: a 3-link kinematic arm on a table
//! plane, disc obstacles, scripted experts, synthetic point clouds, and task
//! success checks.

pub mod expert;
pub mod render;
pub mod scene;

pub use expert::{run_expert, Demo};
pub use render::render_point_cloud;
pub use scene::{sample_scene, Disc, TaskScene};

use serde::{Deserialize, Serialize};

use crate::config::Task;

/// Joint count of the planar arm.
pub const NUM_JOINTS: usize = 3;
/// Action layout: 3 joint-velocity commands plus one gripper command.
pub const ACTION_DIM: usize = 4;
/// Observation layout: 3 joint angles, end-effector x/y, gripper flag.
pub const OBS_DIM: usize = 6;
/// Execution context layout: presence flag, goal−ee, nearest-obstacle−ee.
pub const CTX_DIM: usize = 5;
/// Control period in seconds.
pub const DT: f64 = 0.05;
/// Episode horizon in steps.
pub const T_MAX: usize = 100;
/// Link lengths in meters (arm span 0.9 m).
pub const LINK_LENGTHS: [f64; 3] = [0.4, 0.3, 0.2];
/// A unit command corresponds to this joint rate in rad/s.
pub const MAX_JOINT_RATE: f64 = 1.5;
/// Success distance threshold in meters.
pub const GOAL_TOL: f64 = 0.02;
/// Consecutive in-tolerance steps required for a reach success.
pub const HOLD_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub angles: [f64; NUM_JOINTS],
    /// End-effector position, kept consistent with `angles` at all times.
    pub ee: [f64; 2],
    pub gripper_closed: bool,
}

impl ArmState {
    pub fn from_angles(angles: [f64; NUM_JOINTS]) -> Self {
        Self { angles, ee: forward_kinematics(&angles), gripper_closed: false }
    }

    /// Observation row: angles, end-effector, gripper flag.
    pub fn observation(&self) -> Vec<f64> {
        vec![
            self.angles[0],
            self.angles[1],
            self.angles[2],
            self.ee[0],
            self.ee[1],
            if self.gripper_closed { 1.0 } else { 0.0 },
        ]
    }
}

/// End-effector position of the planar chain (base at the origin).
pub fn forward_kinematics(angles: &[f64; NUM_JOINTS]) -> [f64; 2] {
    let mut pos = [0.0, 0.0];
    let mut theta = 0.0;
    for (i, len) in LINK_LENGTHS.iter().enumerate() {
        theta += angles[i];
        pos[0] += len * theta.cos();
        pos[1] += len * theta.sin();
    }
    pos
}

/// All joint positions including the base and the end effector (4 points).
pub fn link_points(angles: &[f64; NUM_JOINTS]) -> [[f64; 2]; NUM_JOINTS + 1] {
    let mut pts = [[0.0, 0.0]; NUM_JOINTS + 1];
    let mut theta = 0.0;
    for i in 0..NUM_JOINTS {
        theta += angles[i];
        pts[i + 1][0] = pts[i][0] + LINK_LENGTHS[i] * theta.cos();
        pts[i + 1][1] = pts[i][1] + LINK_LENGTHS[i] * theta.sin();
    }
    pts
}

/// 2×3 end-effector Jacobian: column j = Σ_{i≥j} L_i·(−sin Θ_i, cos Θ_i).
pub fn jacobian(angles: &[f64; NUM_JOINTS]) -> [[f64; NUM_JOINTS]; 2] {
    let mut cum = [0.0; NUM_JOINTS];
    let mut theta = 0.0;
    for i in 0..NUM_JOINTS {
        theta += angles[i];
        cum[i] = theta;
    }
    let mut jac = [[0.0; NUM_JOINTS]; 2];
    for j in 0..NUM_JOINTS {
        for i in j..NUM_JOINTS {
            jac[0][j] -= LINK_LENGTHS[i] * cum[i].sin();
            jac[1][j] += LINK_LENGTHS[i] * cum[i].cos();
        }
    }
    jac
}

/// Minimum distance from point `p` to segment `ab`.
pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 { 0.0 } else { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) };
    let closest = [a[0] + t * ab[0], a[1] + t * ab[1]];
    let dx = p[0] - closest[0];
    let dy = p[1] - closest[1];
    (dx * dx + dy * dy).sqrt()
}

/// True if any link segment intersects any obstacle disc.
pub fn arm_collides(angles: &[f64; NUM_JOINTS], obstacles: &[scene::Disc]) -> bool {
    let pts = link_points(angles);
    for o in obstacles {
        for i in 0..NUM_JOINTS {
            if point_segment_distance(o.center, pts[i], pts[i + 1]) < o.radius {
                return true;
            }
        }
    }
    false
}

/// One Euler step. `action` is a 4-vector in [−1,1]: three joint-velocity
/// commands (scaled by [`MAX_JOINT_RATE`]) and a gripper command (> 0.5
/// closes, < −0.5 opens, otherwise holds). Returns the next state and a
/// collision flag against the scene's obstacles.
pub fn step(
    state: &ArmState,
    action: &[f64],
    scene: &TaskScene,
    dt: f64,
) -> (ArmState, bool) {
    assert_eq!(action.len(), ACTION_DIM, "action must have {ACTION_DIM} entries");
    let mut angles = state.angles;
    for j in 0..NUM_JOINTS {
        let cmd = action[j].clamp(-1.0, 1.0);
        angles[j] += cmd * MAX_JOINT_RATE * dt;
    }
    let gripper_closed = if action[3] > 0.5 {
        true
    } else if action[3] < -0.5 {
        false
    } else {
        state.gripper_closed
    };
    let next = ArmState { angles, ee: forward_kinematics(&angles), gripper_closed };
    let collided = arm_collides(&angles, &scene.obstacles);
    (next, collided)
}

/// Execution-time context for the decoder: presence flag, goal offset, and
/// nearest-obstacle offset, both in the end-effector frame.
pub fn exec_context(scene: &TaskScene, state: &ArmState) -> Vec<f64> {
    let mut v = vec![1.0, scene.goal[0] - state.ee[0], scene.goal[1] - state.ee[1], 0.0, 0.0];
    let mut best = f64::INFINITY;
    for o in &scene.obstacles {
        let dx = o.center[0] - state.ee[0];
        let dy = o.center[1] - state.ee[1];
        let d = (dx * dx + dy * dy).sqrt();
        if d < best {
            best = d;
            v[3] = dx;
            v[4] = dy;
        }
    }
    v
}

/// A complete rollout: the visited states (length T+1, initial state first)
/// and per-step collision flags (length T).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rollout {
    pub states: Vec<ArmState>,
    pub collisions: Vec<bool>,
}

/// Task success predicate over a finished rollout.
///
/// - reach: end effector within [`GOAL_TOL`] of the goal for at least
///   [`HOLD_STEPS`] consecutive states.
/// - obstacle-reach: the reach criterion and zero collision flags.
/// - pick-place: gripper closes within tolerance of the object, and the end
///   effector later reaches the goal while still holding.
pub fn success_check(scene: &TaskScene, rollout: &Rollout) -> bool {
    match scene.task {
        Task::Reach => held_at(&rollout.states, scene.goal, HOLD_STEPS),
        Task::ObstacleReach => {
            held_at(&rollout.states, scene.goal, HOLD_STEPS)
                && rollout.collisions.iter().all(|c| !c)
        }
        Task::PickPlace => {
            let object = match scene.object {
                Some(o) => o,
                None => return false,
            };
            let mut grasped_at = None;
            for (i, w) in rollout.states.windows(2).enumerate() {
                if !w[0].gripper_closed
                    && w[1].gripper_closed
                    && dist(w[1].ee, object) <= GOAL_TOL
                {
                    grasped_at = Some(i + 1);
                    break;
                }
            }
            match grasped_at {
                None => false,
                Some(t0) => rollout.states[t0..]
                    .iter()
                    .any(|s| s.gripper_closed && dist(s.ee, scene.goal) <= GOAL_TOL),
            }
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

fn held_at(states: &[ArmState], goal: [f64; 2], hold: usize) -> bool {
    let mut run = 0;
    for s in states {
        if dist(s.ee, goal) <= GOAL_TOL {
            run += 1;
            if run >= hold {
                return true;
            }
        } else {
            run = 0;
        }
    }
    false
}
