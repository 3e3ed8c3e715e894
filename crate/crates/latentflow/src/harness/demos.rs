//! Demonstration collection: scripted-expert rollouts on freshly sampled
//! scenes, written one JSON file per demo plus a manifest.

use std::fs;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::rng::RngStreams;
use crate::simenv::{run_expert, sample_scene};

use super::RunPaths;

pub const DEMO_SET_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoManifest {
    pub version: u32,
    pub config_hash: String,
    pub task: String,
    pub num_demos: usize,
    pub noise_level: f64,
    /// Scene seeds of the kept demos, in file order.
    pub scene_seeds: Vec<u64>,
    pub attempts: usize,
    pub rejected: usize,
}

/// Collect `num_demos` successful expert demonstrations for the configured
/// task and write them under the run directory. Scenes whose expert rollout
/// fails the task (or that cannot be placed at all) are rejected and
/// resampled; a sustained rejection rate above 10% aborts, since it means
/// the scene distribution and the expert disagree too often for the demo
/// set to be representative.
pub fn cmd_gen_demos(cfg: &RunConfig, runs_root: &std::path::Path) -> Result<DemoManifest> {
    let paths = RunPaths::new(runs_root, cfg);
    fs::create_dir_all(paths.demos_dir())?;
    cfg.save(&paths.config())?;

    let streams = RngStreams::new(cfg.seed);
    let mut seed_rng = streams.stream("demo-seeds");
    let mut kept = 0usize;
    let mut attempts = 0usize;
    let mut rejected = 0usize;
    let mut scene_seeds = Vec::with_capacity(cfg.num_demos);

    while kept < cfg.num_demos {
        attempts += 1;
        let scene_seed: u64 = seed_rng.gen();
        let demo = match sample_scene(&streams, cfg.task, scene_seed) {
            Ok(scene) => run_expert(&streams, &scene, cfg.noise_level, cfg.cloud_points),
            Err(e) => {
                rejected += 1;
                check_reject_rate(attempts, rejected, &format!("scene {scene_seed}: {e}"))?;
                continue;
            }
        };
        if !demo.success {
            rejected += 1;
            check_reject_rate(
                attempts,
                rejected,
                &format!("scene {scene_seed}: expert rollout failed the task"),
            )?;
            continue;
        }
        fs::write(paths.demo(kept), serde_json::to_string_pretty(&demo)?)?;
        scene_seeds.push(scene_seed);
        kept += 1;
    }

    let manifest = DemoManifest {
        version: DEMO_SET_VERSION,
        config_hash: cfg.hash(),
        task: cfg.task.name().to_string(),
        num_demos: kept,
        noise_level: cfg.noise_level,
        scene_seeds,
        attempts,
        rejected,
    };
    fs::write(paths.demo_manifest(), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// The rate check only arms after enough attempts to be meaningful.
fn check_reject_rate(attempts: usize, rejected: usize, last_reason: &str) -> Result<()> {
    if attempts >= 20 && rejected as f64 > 0.10 * attempts as f64 {
        return Err(Error::InfeasibleScene(format!(
            "demo generation rejected {rejected}/{attempts} scenes (>10%); last: {last_reason}"
        )));
    }
    Ok(())
}
