//! Scripted expert: a proportional end-effector controller with obstacle
//! repulsion, mapped to joint commands through a damped least-squares
//! Jacobian inverse. Optional Gaussian action noise emulates heterogeneous,
//! suboptimal demonstrators.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::Task;
use crate::geometry::cloud::PointCloud;
use crate::numerics::rng::RngStreams;

use super::render::render_point_cloud;
use super::scene::{sample_start, TaskScene};
use super::{
    exec_context, step, ArmState, Rollout, ACTION_DIM, DT, MAX_JOINT_RATE, NUM_JOINTS,
};

const KP: f64 = 3.0;
const V_MAX: f64 = 0.6;
/// Repulsion activates within this distance of an obstacle surface.
const D_SAFE: f64 = 0.15;
const K_REP: f64 = 0.08;
/// Damping for the least-squares Jacobian inverse.
const LAMBDA: f64 = 0.05;
/// Gripper closes when the end effector is this close to the object.
const GRASP_TOL: f64 = 0.015;

/// One complete demonstration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Demo {
    pub task: Task,
    pub seed: u64,
    pub scene: TaskScene,
    pub dt: f64,
    /// Executed commands, T × 4 rows in [−1,1].
    pub actions: Vec<Vec<f64>>,
    /// Observation before each action, T × 6 rows.
    pub observations: Vec<Vec<f64>>,
    /// Execution context before each action, T × 5 rows.
    pub contexts: Vec<Vec<f64>>,
    /// Static scene cloud (obstacle boundaries + goal marker).
    pub cloud: PointCloud,
    pub success: bool,
}

/// Desired end-effector velocity toward `target` with obstacle repulsion.
fn desired_velocity(scene: &TaskScene, ee: [f64; 2], target: [f64; 2]) -> [f64; 2] {
    let mut v = [KP * (target[0] - ee[0]), KP * (target[1] - ee[1])];
    let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if speed > V_MAX {
        v[0] *= V_MAX / speed;
        v[1] *= V_MAX / speed;
    }
    for o in &scene.obstacles {
        let away = [ee[0] - o.center[0], ee[1] - o.center[1]];
        let dist_c = (away[0] * away[0] + away[1] * away[1]).sqrt().max(1e-9);
        let surf = dist_c - o.radius;
        if surf < D_SAFE {
            let s = surf.max(0.01);
            let mag = (K_REP * (1.0 / s - 1.0 / D_SAFE)).min(2.0 * V_MAX);
            let unit = [away[0] / dist_c, away[1] / dist_c];
            v[0] += mag * unit[0];
            v[1] += mag * unit[1];
            // Tangential slide around the disc, oriented toward the goal
            // side, so the controller cannot stall head-on.
            let to_goal = [target[0] - ee[0], target[1] - ee[1]];
            let side = (away[0] * to_goal[1] - away[1] * to_goal[0]).signum();
            let tangent = [-unit[1] * side, unit[0] * side];
            v[0] += 0.5 * mag * tangent[0];
            v[1] += 0.5 * mag * tangent[1];
        }
    }
    v
}

/// Joint-space repulsion keeping the whole arm body clear: for each obstacle,
/// find the closest point on any link and push that point away through the
/// transpose of its point Jacobian. Steering only the end effector is not
/// enough — the links sweep through obstacles the hand avoids.
fn body_repulsion_qdot(scene: &TaskScene, angles: &[f64; NUM_JOINTS]) -> [f64; NUM_JOINTS] {
    let pts = super::link_points(angles);
    let mut qdot = [0.0; NUM_JOINTS];
    for o in &scene.obstacles {
        // Closest point over every link segment.
        let mut best: Option<(usize, f64, [f64; 2], f64)> = None; // (link, t, point, dist)
        for i in 0..NUM_JOINTS {
            let (a, b) = (pts[i], pts[i + 1]);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((o.center[0] - a[0]) * ab[0] + (o.center[1] - a[1]) * ab[1]) / len2)
                    .clamp(0.0, 1.0)
            };
            let p = [a[0] + t * ab[0], a[1] + t * ab[1]];
            let d = ((p[0] - o.center[0]).powi(2) + (p[1] - o.center[1]).powi(2)).sqrt();
            if best.map_or(true, |(_, _, _, bd)| d < bd) {
                best = Some((i, t, p, d));
            }
        }
        let (link, _t, p, d) = best.unwrap();
        let surf = d - o.radius;
        if surf < D_SAFE {
            let s = surf.max(0.01);
            let mag = (K_REP * (1.0 / s - 1.0 / D_SAFE)).min(2.0 * V_MAX);
            let unit = [(p[0] - o.center[0]) / d.max(1e-9), (p[1] - o.center[1]) / d.max(1e-9)];
            let push = [mag * unit[0], mag * unit[1]];
            // Point Jacobian transpose: joint j ≤ link rotates p about the
            // joint position, so ∂p/∂q_j = (−(p−joint)_y, (p−joint)_x).
            for j in 0..=link {
                let col = [-(p[1] - pts[j][1]), p[0] - pts[j][0]];
                qdot[j] += col[0] * push[0] + col[1] * push[1];
            }
        }
    }
    qdot
}

/// Joint rates realizing the end-effector velocity `v` via the damped
/// least-squares inverse qdot = Jᵀ (J Jᵀ + λ² I)⁻¹ v.
fn joint_rates(state: &ArmState, v: [f64; 2]) -> [f64; NUM_JOINTS] {
    let jac = super::jacobian(&state.angles);
    // A = J Jᵀ + λ² I, a symmetric 2×2.
    let mut a = [[LAMBDA * LAMBDA, 0.0], [0.0, LAMBDA * LAMBDA]];
    for r in 0..2 {
        for c in 0..2 {
            for j in 0..NUM_JOINTS {
                a[r][c] += jac[r][j] * jac[c][j];
            }
        }
    }
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ];
    let w = [
        inv[0][0] * v[0] + inv[0][1] * v[1],
        inv[1][0] * v[0] + inv[1][1] * v[1],
    ];
    let mut qdot = [0.0; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        qdot[j] = jac[0][j] * w[0] + jac[1][j] * w[1];
    }
    qdot
}

/// The expert's command for the current state (before noise).
pub fn expert_action(scene: &TaskScene, state: &ArmState) -> [f64; ACTION_DIM] {
    let (target, gripper_cmd) = match scene.task {
        Task::Reach | Task::ObstacleReach => (scene.goal, -1.0),
        Task::PickPlace => {
            let object = scene.object.expect("pick-place scene has an object");
            if state.gripper_closed {
                (scene.goal, 1.0)
            } else {
                let d = ((state.ee[0] - object[0]).powi(2)
                    + (state.ee[1] - object[1]).powi(2))
                .sqrt();
                if d <= GRASP_TOL {
                    (object, 1.0)
                } else {
                    (object, -1.0)
                }
            }
        }
    };
    let v = desired_velocity(scene, state.ee, target);
    let mut qdot = joint_rates(state, v);
    let body = body_repulsion_qdot(scene, &state.angles);
    for j in 0..NUM_JOINTS {
        qdot[j] += body[j];
    }
    let mut action = [0.0; ACTION_DIM];
    for j in 0..NUM_JOINTS {
        action[j] = (qdot[j] / MAX_JOINT_RATE).clamp(-1.0, 1.0);
    }
    action[3] = gripper_cmd;
    action
}

/// Roll out the expert on a scene, recording a full demonstration.
/// Gaussian noise with std `noise_level` is added to the joint commands
/// (never the gripper) before execution. Deterministic per (streams, scene).
pub fn run_expert(
    streams: &RngStreams,
    scene: &TaskScene,
    noise_level: f64,
    cloud_points: usize,
) -> Demo {
    let mut noise_rng = streams.stream(&format!("expert-noise-{}-{}", scene.task.name(), scene.seed));
    let mut state = sample_start(streams, scene.seed);
    let mut actions = Vec::with_capacity(scene.t_max);
    let mut observations = Vec::with_capacity(scene.t_max);
    let mut contexts = Vec::with_capacity(scene.t_max);
    let mut rollout = Rollout { states: vec![state.clone()], collisions: Vec::new() };

    for _t in 0..scene.t_max {
        observations.push(state.observation());
        contexts.push(exec_context(scene, &state));
        let mut action = expert_action(scene, &state);
        if noise_level > 0.0 {
            for j in 0..NUM_JOINTS {
                let eps: f64 = StandardNormal.sample(&mut noise_rng);
                action[j] = (action[j] + noise_level * eps).clamp(-1.0, 1.0);
            }
        }
        let (next, collided) = step(&state, &action, scene, DT);
        actions.push(action.to_vec());
        rollout.states.push(next.clone());
        rollout.collisions.push(collided);
        state = next;
    }

    let success = super::success_check(scene, &rollout);
    let cloud = render_point_cloud(streams, scene, cloud_points);
    Demo {
        task: scene.task,
        seed: scene.seed,
        scene: scene.clone(),
        dt: DT,
        actions,
        observations,
        contexts,
        cloud,
        success,
    }
}

/// Replay an action sequence from the scene's start state (used to evaluate
/// learned policies and to sanity-check demos).
pub fn replay(streams: &RngStreams, scene: &TaskScene, actions: &[Vec<f64>]) -> Rollout {
    let mut state = sample_start(streams, scene.seed);
    let mut rollout = Rollout { states: vec![state.clone()], collisions: Vec::new() };
    for action in actions {
        let (next, collided) = step(&state, action, scene, DT);
        rollout.states.push(next.clone());
        rollout.collisions.push(collided);
        state = next;
    }
    rollout
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::s_smooth;
    use crate::simenv::scene::sample_scene;

    #[test]
    fn clean_expert_reliably_solves_reach() {
        let streams = RngStreams::new(61);
        let mut successes = 0;
        for seed in 0..100 {
            let scene = sample_scene(&streams, Task::Reach, seed).unwrap();
            let demo = run_expert(&streams, &scene, 0.0, 64);
            if demo.success {
                successes += 1;
            }
        }
        assert!(successes >= 99, "clean expert solved only {successes}/100 reach scenes");
    }

    #[test]
    fn clean_expert_handles_obstacles_without_collisions() {
        let streams = RngStreams::new(62);
        let mut successes = 0;
        for seed in 0..100 {
            let scene = sample_scene(&streams, Task::ObstacleReach, seed).unwrap();
            let demo = run_expert(&streams, &scene, 0.0, 64);
            if demo.success {
                successes += 1;
            }
        }
        assert!(successes >= 95, "expert solved only {successes}/100 obstacle scenes");
    }

    #[test]
    fn clean_expert_completes_pick_and_place() {
        let streams = RngStreams::new(63);
        let mut successes = 0;
        for seed in 0..50 {
            let scene = sample_scene(&streams, Task::PickPlace, seed).unwrap();
            let demo = run_expert(&streams, &scene, 0.0, 64);
            if demo.success {
                successes += 1;
            }
        }
        assert!(successes >= 45, "expert solved only {successes}/50 pick-place scenes");
    }

    #[test]
    fn expert_is_deterministic_at_zero_noise() {
        let streams = RngStreams::new(64);
        let scene = sample_scene(&streams, Task::Reach, 7).unwrap();
        let a = run_expert(&streams, &scene, 0.0, 32);
        let b = run_expert(&streams, &scene, 0.0, 32);
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.cloud, b.cloud);
    }

    #[test]
    fn noise_makes_demonstrations_rougher() {
        let streams = RngStreams::new(65);
        let mut rougher = 0;
        let mut total = 0;
        for seed in 0..20 {
            let scene = sample_scene(&streams, Task::Reach, seed).unwrap();
            let clean = run_expert(&streams, &scene, 0.0, 32);
            let noisy = run_expert(&streams, &scene, 0.1, 32);
            let f_c = 0.25 * 0.5 / DT;
            let sc = s_smooth(&clean.actions, DT, f_c, 1.0).unwrap();
            let sn = s_smooth(&noisy.actions, DT, f_c, 1.0).unwrap();
            total += 1;
            if sn.s_smooth > sc.s_smooth {
                rougher += 1;
            }
        }
        assert_eq!(rougher, total, "noise must strictly roughen every demo");
    }

    #[test]
    fn replay_of_recorded_actions_reproduces_success() {
        let streams = RngStreams::new(66);
        let scene = sample_scene(&streams, Task::ObstacleReach, 11).unwrap();
        let demo = run_expert(&streams, &scene, 0.05, 32);
        let rollout = replay(&streams, &scene, &demo.actions);
        assert_eq!(
            super::super::success_check(&scene, &rollout),
            demo.success,
            "replaying the recorded actions must reproduce the outcome"
        );
    }
}
