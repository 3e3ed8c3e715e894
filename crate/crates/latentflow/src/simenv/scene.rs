//! Task scene sampling: goals, objects, and disc obstacles with feasibility
//! constraints (reachable goal, obstacles clear of start/goal and base).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::Task;
use crate::error::{Error, Result};
use crate::numerics::rng::RngStreams;

use super::{forward_kinematics, ArmState, NUM_JOINTS, T_MAX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScene {
    pub task: Task,
    pub goal: [f64; 2],
    /// Object to transport (pick-place only).
    pub object: Option<[f64; 2]>,
    pub obstacles: Vec<Disc>,
    pub t_max: usize,
    pub seed: u64,
}

/// Nominal start pose; per-scene jitter is added on top.
const BASE_ANGLES: [f64; NUM_JOINTS] = [1.9, -0.7, -0.4];
/// Obstacles must keep this margin from the start and goal positions.

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Sample the arm's start state for a scene (deterministic per seed).
pub fn sample_start(streams: &RngStreams, scene_seed: u64) -> ArmState {
    let mut rng = streams.stream(&format!("scene-start-{scene_seed}"));
    let mut angles = BASE_ANGLES;
    for a in angles.iter_mut() {
        *a += rng.gen_range(-0.15..0.15);
    }
    ArmState::from_angles(angles)
}

/// Sample a feasible scene for `task`. Deterministic per (base streams,
/// scene_seed). Fails only if constraint rejection exhausts its budget.
pub fn sample_scene(streams: &RngStreams, task: Task, scene_seed: u64) -> Result<TaskScene> {
    let mut rng = streams.stream(&format!("scene-{scene_seed}"));
    let start_ee = forward_kinematics(&sample_start(streams, scene_seed).angles);

    for _attempt in 0..50 {
        // Goal in a reachable annulus of the upper half-plane.
        let r = rng.gen_range(0.4..0.8);
        let phi = rng.gen_range(0.35..std::f64::consts::PI - 0.35);
        let goal = [r * phi.cos(), r * phi.sin()];
        if dist(goal, start_ee) < 0.25 {
            continue; // trivially close scenes teach nothing
        }

        let object = if task == Task::PickPlace {
            // Object between start and goal, biased toward the start.
            let t = rng.gen_range(0.3..0.5);
            let jitter = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
            let o = [
                start_ee[0] + t * (goal[0] - start_ee[0]) + jitter[0],
                start_ee[1] + t * (goal[1] - start_ee[1]) + jitter[1],
            ];
            if o[0] * o[0] + o[1] * o[1] > 0.85 * 0.85 || dist(o, goal) < 0.15 {
                continue;
            }
            Some(o)
        } else {
            None
        };

        let obstacles = if task == Task::ObstacleReach {
            // One disc beside the straight start→goal line: close enough that
            // the repulsion field bends the path (edge within ~0.12 of the
            // line, inside the controller's 0.15 influence radius) but never
            // straddling it, and far enough from the arm base that only the
            // distal links can get near it.
            let radius = rng.gen_range(0.05..0.09);
            let t = rng.gen_range(0.4..0.6);
            let mid = [
                start_ee[0] + t * (goal[0] - start_ee[0]),
                start_ee[1] + t * (goal[1] - start_ee[1]),
            ];
            let gap = rng.gen_range(0.03..0.10);
            let seg = [goal[0] - start_ee[0], goal[1] - start_ee[1]];
            let seg_len = (seg[0] * seg[0] + seg[1] * seg[1]).sqrt();
            let normal = [-seg[1] / seg_len, seg[0] / seg_len];
            // Keep the disc on the side of the line away from the arm base:
            // the elbow and forearm trail toward the base, so a disc on that
            // side gets swept even when the hand clears it.
            let origin_side = normal[0] * start_ee[0] + normal[1] * start_ee[1];
            let sign = if origin_side >= 0.0 { 1.0 } else { -1.0 };
            let side = sign * (radius + gap);
            let center = [mid[0] + side * normal[0], mid[1] + side * normal[1]];
            let disc = Disc { center, radius };
            // Start and goal must sit outside the repulsion influence zone
            // (0.15 around the surface), otherwise the controller's push can
            // balance its pull at an equilibrium just short of the goal.
            let clear = dist(center, goal) > radius + 0.17
                && dist(center, start_ee) > radius + 0.17
                && dist(center, [0.0, 0.0]) > radius + 0.30;
            if !clear {
                continue;
            }
            vec![disc]
        } else {
            vec![]
        };

        return Ok(TaskScene { task, goal, object, obstacles, t_max: T_MAX, seed: scene_seed });
    }
    Err(Error::InfeasibleScene(format!(
        "no feasible {} scene after 50 attempts (seed {scene_seed})",
        task.name()
    )))
}
