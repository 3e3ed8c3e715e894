//! Synthetic scene point clouds: uniform samples on obstacle boundaries and
//! a goal marker circle, lifted to a table plane with small depth noise.

use rand::Rng;

use crate::geometry::cloud::PointCloud;
use crate::numerics::rng::RngStreams;

use super::scene::TaskScene;

/// Table plane height.
pub const TABLE_Z: f64 = 0.0;
/// Uniform depth noise half-width.
pub const Z_NOISE: f64 = 0.005;
/// Radius of the circle marking the goal position.
pub const GOAL_MARKER_RADIUS: f64 = 0.02;

/// Sample `n_points` on the scene's visible geometry. Obstacle boundaries
/// share three quarters of the budget (proportionally to circumference);
/// the goal marker takes the rest. Scenes without obstacles spend the whole
/// budget on the marker. Deterministic given the stream set and scene seed.
pub fn render_point_cloud(streams: &RngStreams, scene: &TaskScene, n_points: usize) -> PointCloud {
    assert!(n_points >= 1, "cannot render an empty cloud");
    let mut rng = streams.stream(&format!("cloud-{}-{}", scene.task.name(), scene.seed));
    let mut points = Vec::with_capacity(n_points);

    let obstacle_budget = if scene.obstacles.is_empty() { 0 } else { n_points * 3 / 4 };
    let goal_budget = n_points - obstacle_budget;

    if !scene.obstacles.is_empty() {
        let total_circ: f64 = scene.obstacles.iter().map(|o| o.radius).sum();
        let mut assigned = 0;
        for (i, o) in scene.obstacles.iter().enumerate() {
            let share = if i + 1 == scene.obstacles.len() {
                obstacle_budget - assigned
            } else {
                ((o.radius / total_circ) * obstacle_budget as f64).round() as usize
            };
            assigned += share;
            for _ in 0..share {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                points.push([
                    o.center[0] + o.radius * theta.cos(),
                    o.center[1] + o.radius * theta.sin(),
                    TABLE_Z + rng.gen_range(-Z_NOISE..Z_NOISE),
                ]);
            }
        }
    }
    for _ in 0..goal_budget {
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        points.push([
            scene.goal[0] + GOAL_MARKER_RADIUS * theta.cos(),
            scene.goal[1] + GOAL_MARKER_RADIUS * theta.sin(),
            TABLE_Z + rng.gen_range(-Z_NOISE..Z_NOISE),
        ]);
    }
    PointCloud::new(points)
}
