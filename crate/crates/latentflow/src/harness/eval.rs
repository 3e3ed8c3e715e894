//! Closed-loop policy evaluation. Each trial replans every `chunk_len`
//! steps: encode the scene and recent observations, draw one base sample,
//! apply the one-step flow map, decode the first chunk against the live
//! execution context, and run those actions in the environment. Success
//! counts, smoothness scores, and trajectories are written per run;
//! response-time statistics go to a separate file because wall-clock
//! numbers are the one output a rerun may legitimately change.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{PolicyKind, RunConfig};
use crate::error::{Error, Result};
use crate::latent::vae::ActionVae;
use crate::metrics::{aggregate_eval, measure_response_time, s_jerk, s_smooth, EvalSummary};
use crate::numerics::array::DenseArray;
use crate::numerics::normalize::NormStats;
use crate::numerics::params::ParamStore;
use crate::numerics::rng::RngStreams;
use crate::numerics::tape::Tape;
use crate::simenv::scene::sample_start;
use crate::simenv::{
    exec_context, render_point_cloud, sample_scene, step, success_check, Rollout, ACTION_DIM, DT,
};

use super::train::{rebuild_flow, rebuild_vae};
use super::{batch_films, group_scene, history_features, load_demos, FlowStack, RunPaths,
    SceneTensors};

pub const EVAL_VERSION: u32 = 1;

/// A trained policy rebuilt from its run's checkpoints.
pub struct Policy {
    pub cfg: RunConfig,
    stack: FlowStack,
    store: ParamStore,
    norm: NormStats,
    /// Present only for the latent policy: the frozen action model.
    vae: Option<(ActionVae, ParamStore)>,
}

impl Policy {
    pub fn load(cfg: &RunConfig, paths: &RunPaths) -> Result<Self> {
        let (stack, store, norm, stage2_frozen) = rebuild_flow(cfg, &paths.stage2())?;
        let vae = match cfg.policy {
            PolicyKind::LatentFlow => {
                let (vae, vae_store, frozen) = rebuild_vae(cfg, &paths.stage1())?;
                if stage2_frozen.as_deref() != Some(frozen.as_str()) {
                    return Err(Error::FrozenWeightsChanged {
                        expected: stage2_frozen.unwrap_or_else(|| "<missing>".into()),
                        actual: frozen,
                    });
                }
                Some((vae, vae_store))
            }
            PolicyKind::RawFlow => None,
        };
        Ok(Self { cfg: cfg.clone(), stack, store, norm, vae })
    }

    /// One replanning cycle: condition, apply the flow map once, decode, and
    /// return the next `chunk_len` action rows plus the number of velocity-
    /// field evaluations the cycle spent (always 1; recorded so the trial
    /// log can prove it).
    pub fn plan(
        &self,
        scene: &SceneTensors,
        history: &[f64],
        exec_ctx: &[f64],
        noise: &[f64],
    ) -> Result<(Vec<Vec<f64>>, u64)> {
        let d = self.stack.model.dims.state_dim();
        assert_eq!(noise.len(), d, "one base row per plan");
        let mut tape = Tape::new();
        let films =
            batch_films(&mut tape, &self.store, &self.stack, &self.cfg, &[scene], &[history]);
        let z = tape.leaf(DenseArray::matrix(1, d, noise.to_vec()));
        let out = self.stack.model.generate(
            &mut tape,
            &self.store,
            z,
            Some(&films),
            self.cfg.gen_time,
        )?;
        let evals = tape.eval_count();
        let row = self.norm.denormalize(tape.value(out).values());
        let chunk = match &self.vae {
            Some((vae, vae_store)) => {
                let decoded = vae.decode_window(vae_store, &row, exec_ctx);
                let w = decoded.shape()[1];
                (0..self.cfg.chunk_len)
                    .map(|i| decoded.values()[i * w..(i + 1) * w].to_vec())
                    .collect()
            }
            None => (0..self.cfg.chunk_len)
                .map(|i| row[i * ACTION_DIM..(i + 1) * ACTION_DIM].to_vec())
                .collect(),
        };
        Ok((chunk, evals))
    }
}

/// One evaluated trial.
#[derive(Debug, Clone)]
struct TrialRow {
    seed: usize,
    trial: usize,
    scene_seed: u64,
    success: bool,
    steps: usize,
    collisions: usize,
    plans: usize,
    flow_evals: u64,
    smooth: Option<crate::metrics::SmoothnessReport>,
    note: String,
}

/// Everything a report needs from one run's evaluation. Serialized with a
/// fixed field order so identical runs produce identical bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub version: u32,
    pub config_hash: String,
    pub task: String,
    pub policy: String,
    pub summary: EvalSummary,
    pub jerk_ref: f64,
    pub cutoff_hz: f64,
    pub smooth_mean: f64,
    pub smooth_std: f64,
    pub sjerk_mean: f64,
    pub sfreq_mean: f64,
    pub collision_trials: usize,
    pub trials_per_seed: usize,
    pub config: RunConfig,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Joint-angle rows (the first three observation entries) from a rollout.
fn angle_traj(rollout: &Rollout) -> Vec<Vec<f64>> {
    rollout.states.iter().map(|s| s.angles.to_vec()).collect()
}

/// The jerk scale that anchors the smoothness score: the median jerk index
/// of this run's own demonstrations. Demos are generated before either
/// policy trains, so both policies in a comparison share the same anchor.
pub fn demo_jerk_ref(demos: &[crate::simenv::expert::Demo]) -> Result<f64> {
    let mut refs = Vec::with_capacity(demos.len());
    for demo in demos {
        let traj: Vec<Vec<f64>> =
            demo.observations.iter().map(|o| o[..3].to_vec()).collect();
        refs.push(s_jerk(&traj, demo.dt)?);
    }
    if refs.is_empty() {
        return Err(Error::InvalidArgument("no demos to anchor the jerk scale".into()));
    }
    Ok(median(refs))
}

fn csv_note(s: &str) -> String {
    s.replace([',', '\n'], ";")
}

/// Run the closed-loop evaluation for one trained run directory.
pub fn cmd_eval(cfg: &RunConfig, runs_root: &Path) -> Result<EvalRecord> {
    let paths = RunPaths::new(runs_root, cfg);
    let policy = Policy::load(cfg, &paths)?;
    let demos = load_demos(&paths)?;
    let jerk_ref = demo_jerk_ref(&demos)?;
    let cutoff_hz = cfg.freq_cutoff_frac * (0.5 / DT);
    let d = policy.stack.model.dims.state_dim();

    let streams = RngStreams::new(cfg.seed);
    let mut scene_rng = streams.stream("eval-scenes");
    fs::create_dir_all(paths.trajectories_dir())?;

    let mut rows: Vec<TrialRow> = Vec::with_capacity(cfg.eval_seeds * cfg.eval_trials);
    // Kept for the latency probe: the first trial that produced a scene.
    let mut probe: Option<(SceneTensors, Vec<f64>, Vec<f64>, Vec<f64>)> = None;

    for seed in 0..cfg.eval_seeds {
        for trial in 0..cfg.eval_trials {
            let scene_seed: u64 = scene_rng.gen();
            let traj_path = paths.trajectories_dir().join(format!("trial_{seed}_{trial}.csv"));
            let mut traj_csv = String::from("t,q0,q1,q2,ee_x,ee_y\n");

            let scene = match sample_scene(&streams, cfg.task, scene_seed) {
                Ok(s) => s,
                Err(e) => {
                    // No scene means no rollout; the trial is a logged
                    // failure and the trajectory file stays header-only.
                    fs::write(&traj_path, &traj_csv)?;
                    rows.push(TrialRow {
                        seed,
                        trial,
                        scene_seed,
                        success: false,
                        steps: 0,
                        collisions: 0,
                        plans: 0,
                        flow_evals: 0,
                        smooth: None,
                        note: csv_note(&format!("scene-error: {e}")),
                    });
                    continue;
                }
            };
            let cloud = render_point_cloud(&streams, &scene, cfg.cloud_points);
            let tensors = group_scene(&cloud, cfg.fps_centers, cfg.neighbors)?;
            let mut noise_rng = streams.stream(&format!("eval-gen-{seed}-{trial}"));

            let start = sample_start(&streams, scene_seed);
            let mut state = start.clone();
            let mut observations = vec![state.observation()];
            let mut rollout = Rollout { states: vec![start], collisions: Vec::new() };
            let mut plans = 0usize;
            let mut flow_evals = 0u64;
            let mut note = String::new();

            'cycles: while rollout.collisions.len() < scene.t_max {
                let history =
                    history_features(&observations, observations.len() - 1, cfg.history_len);
                let ctx = exec_context(&scene, &state);
                let noise: Vec<f64> =
                    (0..d).map(|_| StandardNormal.sample(&mut noise_rng)).collect();
                if probe.is_none() {
                    probe = Some((tensors.clone(), history.clone(), ctx.clone(), noise.clone()));
                }
                let(chunk, evals) = match policy.plan(&tensors, &history, &ctx, &noise) {
                    Ok(out) => out,
                    Err(e) => {
                        note = csv_note(&format!("plan-error: {e}"));
                        break 'cycles;
                    }
                };
                plans += 1;
                flow_evals += evals;
                for action in &chunk {
                    if rollout.collisions.len() >= scene.t_max {
                        break;
                    }
                    if action.iter().any(|a| !a.is_finite()) {
                        note = csv_note("non-finite action");
                        break 'cycles;
                    }
                    let (next, collided) = step(&state, action, &scene, DT);
                    if next.angles.iter().any(|a| !a.is_finite()) {
                        note = csv_note("non-finite state");
                        break 'cycles;
                    }
                    observations.push(next.observation());
                    rollout.states.push(next.clone());
                    rollout.collisions.push(collided);
                    state = next;
                }
            }

            let failed_env = !note.is_empty();
            let success = !failed_env && success_check(&scene, &rollout);
            let smooth = s_smooth(&angle_traj(&rollout), DT, cutoff_hz, jerk_ref).ok();
            for (t, s) in rollout.states.iter().enumerate() {
                traj_csv.push_str(&format!(
                    "{t},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
                    s.angles[0], s.angles[1], s.angles[2], s.ee[0], s.ee[1]
                ));
            }
            fs::write(&traj_path, &traj_csv)?;
            rows.push(TrialRow {
                seed,
                trial,
                scene_seed,
                success,
                steps: rollout.collisions.len(),
                collisions: rollout.collisions.iter().filter(|c| **c).count(),
                plans,
                flow_evals,
                smooth,
                note,
            });
        }
    }

    let mut trials_csv =
        String::from("seed,trial,scene_seed,success,steps,collisions,plans,flow_evals,s_jerk,s_freq,s_smooth,note\n");
    for r in &rows {
        let (sj, sf, ss) = match &r.smooth {
            Some(m) => (
                format!("{:.9e}", m.s_jerk),
                format!("{:.9e}", m.s_freq),
                format!("{:.9e}", m.s_smooth),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        trials_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{sj},{sf},{ss},{}\n",
            r.seed, r.trial, r.scene_seed, r.success as u8, r.steps, r.collisions, r.plans,
            r.flow_evals, r.note
        ));
    }
    fs::write(paths.trials(), &trials_csv)?;

    let per_seed: Vec<(usize, usize)> = (0..cfg.eval_seeds)
        .map(|s| {
            let mine: Vec<_> = rows.iter().filter(|r| r.seed == s).collect();
            (mine.iter().filter(|r| r.success).count(), mine.len())
        })
        .collect();
    let summary = aggregate_eval(&per_seed)?;

    let scored: Vec<&crate::metrics::SmoothnessReport> =
        rows.iter().filter_map(|r| r.smooth.as_ref()).collect();
    if scored.is_empty() {
        return Err(Error::InvalidArgument(
            "no trial produced a scoreable trajectory".into(),
        ));
    }
    let inv = 1.0 / scored.len() as f64;
    let smooth_mean = scored.iter().map(|m| m.s_smooth).sum::<f64>() * inv;
    let smooth_var = scored
        .iter()
        .map(|m| (m.s_smooth - smooth_mean).powi(2))
        .sum::<f64>()
        * inv;
    let record = EvalRecord {
        version: EVAL_VERSION,
        config_hash: cfg.hash(),
        task: cfg.task.name().to_string(),
        policy: cfg.policy.name().to_string(),
        summary,
        jerk_ref,
        cutoff_hz,
        smooth_mean,
        smooth_std: smooth_var.sqrt(),
        sjerk_mean: scored.iter().map(|m| m.s_jerk).sum::<f64>() * inv,
        sfreq_mean: scored.iter().map(|m| m.s_freq).sum::<f64>() * inv,
        collision_trials: rows.iter().filter(|r| r.collisions > 0).count(),
        trials_per_seed: cfg.eval_trials,
        config: cfg.clone(),
    };
    fs::write(paths.eval_record(), serde_json::to_string_pretty(&record)?)?;

    // Response time covers planning only — conditioning, the one-step flow
    // map, and the chunk decode — never environment stepping. Wall-clock
    // stats land in their own file so everything above stays bit-stable
    // across reruns.
    if let Some((tensors, history, ctx, noise)) = &probe {
        let stats = measure_response_time(
            || {
                policy.plan(tensors, history, ctx, noise).unwrap();
            },
            10,
            100,
        );
        fs::write(paths.latency(), serde_json::to_string_pretty(&stats)?)?;
    }

    Ok(record)
}
