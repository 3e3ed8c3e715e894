//! Pipeline orchestration: demonstration generation, the two training
//! stages, closed-loop evaluation, and report emission. Every command is
//! keyed by a [`RunConfig`]; all artifacts live under a run directory named
//! by the config's short hash so reruns with the same settings land in the
//! same place (and must reproduce the same bytes).

pub mod demos;
pub mod eval;
pub mod report;
pub mod train;

use std::path::{Path, PathBuf};

use crate::config::{PolicyKind, RunConfig};
use crate::error::{Error, Result};
use crate::flow::{FlowDims, FlowFilms, FlowModel};
use crate::geometry::cloud::{fps, group_neighborhoods, PointCloud};
use crate::geometry::scene_enc::SceneEncoder;
use crate::latent::vae::{ActionVae, VaeDims};
use crate::numerics::array::DenseArray;
use crate::numerics::params::ParamStore;
use crate::numerics::rng::RngStreams;
use crate::numerics::tape::Tape;
use crate::simenv::expert::Demo;
use crate::simenv::{ACTION_DIM, CTX_DIM, OBS_DIM};

pub use demos::cmd_gen_demos;
pub use eval::{cmd_eval, Policy};
pub use report::cmd_report;
pub use train::{cmd_train_flow, cmd_train_latent};

/// Artifact layout inside one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(runs_root: &Path, cfg: &RunConfig) -> Self {
        Self { root: runs_root.join(cfg.short_hash()) }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn demos_dir(&self) -> PathBuf {
        self.root.join("demos")
    }

    pub fn demo(&self, i: usize) -> PathBuf {
        self.demos_dir().join(format!("demo_{i:03}.json"))
    }

    pub fn demo_manifest(&self) -> PathBuf {
        self.demos_dir().join("manifest.json")
    }

    pub fn stage1(&self) -> PathBuf {
        self.root.join("stage1.ckpt.json")
    }

    pub fn stage2(&self) -> PathBuf {
        self.root.join("stage2.ckpt.json")
    }

    pub fn stage1_curves(&self) -> PathBuf {
        self.root.join("stage1_curves.csv")
    }

    pub fn stage2_curves(&self) -> PathBuf {
        self.root.join("stage2_curves.csv")
    }

    pub fn eval_record(&self) -> PathBuf {
        self.root.join("eval.json")
    }

    pub fn trials(&self) -> PathBuf {
        self.root.join("trials.csv")
    }

    pub fn trajectories_dir(&self) -> PathBuf {
        self.root.join("trajectories")
    }

    /// Wall-clock latency lives apart from the deterministic artifacts: it
    /// is the one output a rerun is allowed to change.
    pub fn latency(&self) -> PathBuf {
        self.root.join("latency.json")
    }
}

/// Concatenated `[h·OBS_DIM]` history ending at step `t`, oldest row first.
/// Steps before the episode start are padded with the first observation.
pub fn history_features(observations: &[Vec<f64>], t: usize, h: usize) -> Vec<f64> {
    assert!(t < observations.len(), "history anchor {t} out of range");
    let mut out = Vec::with_capacity(h * OBS_DIM);
    for back in (0..h).rev() {
        let idx = t.saturating_sub(back);
        out.extend_from_slice(&observations[idx]);
    }
    out
}

/// Training windows cut from a demo set: flattened action rows plus the
/// conditioning signals observed at each window's start step.
pub struct WindowSet {
    /// `[n, H·d_a]` actions.
    pub actions: DenseArray,
    /// `[n, CTX_DIM]` execution context at the window start.
    pub contexts: DenseArray,
    /// `[n][history_len·OBS_DIM]` observation histories at the window start.
    pub histories: Vec<Vec<f64>>,
    /// Window → demo index.
    pub demo_of: Vec<usize>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.demo_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demo_of.is_empty()
    }
}

pub fn build_windows(demos: &[Demo], cfg: &RunConfig) -> Result<WindowSet> {
    let h = cfg.horizon();
    let d_a = ACTION_DIM;
    let stride = cfg.window_stride.max(1);
    let mut actions = Vec::new();
    let mut contexts = Vec::new();
    let mut histories = Vec::new();
    let mut demo_of = Vec::new();
    for (di, demo) in demos.iter().enumerate() {
        let steps = demo.actions.len();
        if steps < h {
            return Err(Error::InvalidArgument(format!(
                "demo {di} has {steps} steps, shorter than the {h}-step window"
            )));
        }
        let mut t = 0;
        while t + h <= steps {
            for row in &demo.actions[t..t + h] {
                actions.extend_from_slice(row);
            }
            contexts.extend_from_slice(&demo.contexts[t]);
            histories.push(history_features(&demo.observations, t, cfg.history_len));
            demo_of.push(di);
            t += stride;
        }
    }
    let n = demo_of.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no training windows".into()));
    }
    Ok(WindowSet {
        actions: DenseArray::new(vec![n, h * d_a], actions),
        contexts: DenseArray::new(vec![n, CTX_DIM], contexts),
        histories,
        demo_of,
    })
}

/// Farthest-point centers and their neighborhood offsets for one cloud,
/// flattened into the row layout the scene encoder consumes.
#[derive(Debug, Clone)]
pub struct SceneTensors {
    /// `[k·m·3]` neighbor − center offsets, grouped center-major.
    pub offsets: Vec<f64>,
    /// `[k·3]` center coordinates.
    pub centers: Vec<f64>,
}

pub fn group_scene(cloud: &PointCloud, k: usize, m: usize) -> Result<SceneTensors> {
    let idx = fps(cloud, k, 0)?;
    let hoods = group_neighborhoods(cloud, &idx, m)?;
    let mut offsets = Vec::with_capacity(k * m * 3);
    for hood in &hoods {
        for o in hood {
            offsets.extend_from_slice(o);
        }
    }
    let mut centers = Vec::with_capacity(k * 3);
    for &ci in &idx {
        centers.extend_from_slice(&cloud.points[ci]);
    }
    Ok(SceneTensors { offsets, centers })
}

/// The flow side of a policy: point-cloud encoder plus the conditioned
/// velocity network. Construction order is fixed so a parameter store
/// rebuilt from the same config aligns index-for-index with a checkpoint.
pub struct FlowStack {
    pub scene: SceneEncoder,
    pub model: FlowModel,
}

/// State layout the flow generates over: whole latent windows for the
/// latent policy, whole normalized action windows for the raw baseline.
pub fn flow_dims(cfg: &RunConfig) -> FlowDims {
    match cfg.policy {
        PolicyKind::LatentFlow => FlowDims::from_config(cfg),
        PolicyKind::RawFlow => {
            FlowDims { k: cfg.horizon(), d_z: ACTION_DIM, ..FlowDims::from_config(cfg) }
        }
    }
}

pub fn build_vae(cfg: &RunConfig, store: &mut ParamStore, streams: &RngStreams) -> ActionVae {
    let mut rng = streams.stream("stage1-init");
    ActionVae::new(store, &mut rng, "vae", VaeDims::from_config(cfg))
}

pub fn build_flow_stack(
    cfg: &RunConfig,
    store: &mut ParamStore,
    streams: &RngStreams,
) -> FlowStack {
    let mut rng = streams.stream("stage2-init");
    let scene =
        SceneEncoder::new(store, &mut rng, "scene", cfg.local_feat_dim, cfg.center_feat_dim);
    let model = FlowModel::new(store, &mut rng, "flow", flow_dims(cfg));
    FlowStack { scene, model }
}

/// FiLM parameters for a batch of windows: encode each window's scene,
/// append its observation history to the center feature, and run both
/// conditioning heads. `scenes` and `histories` are per-window rows.
pub fn batch_films(
    tape: &mut Tape,
    store: &ParamStore,
    stack: &FlowStack,
    cfg: &RunConfig,
    scenes: &[&SceneTensors],
    histories: &[&[f64]],
) -> FlowFilms {
    let b = scenes.len();
    assert_eq!(histories.len(), b, "one history per window");
    let (k, m) = (cfg.fps_centers, cfg.neighbors);
    let mut offsets = Vec::with_capacity(b * k * m * 3);
    let mut centers = Vec::with_capacity(b * k * 3);
    for s in scenes {
        offsets.extend_from_slice(&s.offsets);
        centers.extend_from_slice(&s.centers);
    }
    let offsets = tape.leaf(DenseArray::new(vec![b * k * m, 3], offsets));
    let centers = tape.leaf(DenseArray::new(vec![b * k, 3], centers));
    let f_l = stack.scene.encode_local(tape, store, offsets, k, m);
    let f_c = stack.scene.encode_center(tape, store, centers, k);
    let hist_dim = cfg.history_len * OBS_DIM;
    let mut hist = Vec::with_capacity(b * hist_dim);
    for h in histories {
        assert_eq!(h.len(), hist_dim, "history width");
        hist.extend_from_slice(h);
    }
    let hist = tape.leaf(DenseArray::new(vec![b, hist_dim], hist));
    let center_in = tape.concat_cols(&[f_c, hist]);
    stack.model.condition(tape, store, f_l, center_in)
}

/// Read a run's demo files back, verifying the manifest count.
pub fn load_demos(paths: &RunPaths) -> Result<Vec<Demo>> {
    let manifest_text = std::fs::read_to_string(paths.demo_manifest()).map_err(|e| {
        Error::InvalidArgument(format!(
            "no demo manifest at {} ({e}); run gen-demos first",
            paths.demo_manifest().display()
        ))
    })?;
    let manifest: demos::DemoManifest = serde_json::from_str(&manifest_text)?;
    let mut out = Vec::with_capacity(manifest.num_demos);
    for i in 0..manifest.num_demos {
        let text = std::fs::read_to_string(paths.demo(i))?;
        out.push(serde_json::from_str(&text)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Task;

    #[test]
    fn history_pads_by_repeating_the_first_observation() {
        let obs = vec![vec![1.0; OBS_DIM], vec![2.0; OBS_DIM], vec![3.0; OBS_DIM]];
        let f = history_features(&obs, 0, 2);
        assert_eq!(f.len(), 2 * OBS_DIM);
        assert!(f[..OBS_DIM].iter().all(|&v| v == 1.0));
        assert!(f[OBS_DIM..].iter().all(|&v| v == 1.0));
        let f = history_features(&obs, 2, 2);
        assert!(f[..OBS_DIM].iter().all(|&v| v == 2.0), "older row first");
        assert!(f[OBS_DIM..].iter().all(|&v| v == 3.0));
    }

    #[test]
    fn windows_cover_each_demo_with_the_configured_stride() {
        let cfg = RunConfig::default();
        let streams = RngStreams::new(11);
        let scene = crate::simenv::scene::sample_scene(&streams, Task::Reach, 5).unwrap();
        let demo = crate::simenv::expert::run_expert(&streams, &scene, 0.0, 32);
        let per_demo = (demo.actions.len() - cfg.horizon()) / cfg.window_stride + 1;
        let set = build_windows(&[demo.clone(), demo], &cfg).unwrap();
        assert_eq!(set.len(), 2 * per_demo);
        assert_eq!(set.actions.shape(), &[set.len(), cfg.horizon() * ACTION_DIM]);
        assert_eq!(set.contexts.shape(), &[set.len(), CTX_DIM]);
        assert_eq!(set.demo_of[per_demo], 1, "second demo's windows follow the first");
        // First window of each demo starts at step 0.
        let w = cfg.horizon() * ACTION_DIM;
        let demo0_first = &set.actions.values()[..ACTION_DIM];
        let demo1_first = &set.actions.values()[per_demo * w..per_demo * w + ACTION_DIM];
        assert_eq!(demo0_first, demo1_first, "identical demos give identical rows");
    }

    #[test]
    fn run_paths_are_keyed_by_the_config_hash() {
        let root = Path::new("/tmp/runs");
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 9;
        assert_ne!(RunPaths::new(root, &a).root, RunPaths::new(root, &b).root);
        assert_eq!(
            RunPaths::new(root, &a).root,
            root.join(a.short_hash()),
            "directory is the short hash"
        );
    }

    #[test]
    fn raw_flow_state_covers_the_action_window() {
        let mut cfg = RunConfig::default();
        cfg.policy = PolicyKind::RawFlow;
        let dims = flow_dims(&cfg);
        assert_eq!(dims.state_dim(), cfg.horizon() * ACTION_DIM);
        cfg.policy = PolicyKind::LatentFlow;
        let dims = flow_dims(&cfg);
        assert_eq!(dims.state_dim(), cfg.num_chunks * cfg.latent_dim);
    }

    #[test]
    fn grouped_scene_rows_match_the_encoder_layout() {
        let streams = RngStreams::new(3);
        let scene = crate::simenv::scene::sample_scene(&streams, Task::ObstacleReach, 2).unwrap();
        let cloud = crate::simenv::render::render_point_cloud(&streams, &scene, 64);
        let (k, m) = (8, 6);
        let g = group_scene(&cloud, k, m).unwrap();
        assert_eq!(g.offsets.len(), k * m * 3);
        assert_eq!(g.centers.len(), k * 3);
        // Each center's first neighbor is itself, so the first offset of
        // every group is exactly zero.
        for c in 0..k {
            let o = &g.offsets[c * m * 3..c * m * 3 + 3];
            assert_eq!(o, &[0.0, 0.0, 0.0]);
        }
    }
}
