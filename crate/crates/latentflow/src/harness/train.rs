//! The two training stages. Stage 1 fits the variational action model on
//! demo windows; stage 2 freezes it and fits the conditioned flow over the
//! window representation (latent codes, or normalized raw actions for the
//! baseline policy). Both stages write per-epoch curves, checkpoint on a
//! coarse cadence, and read their final weights through an EMA shadow.

use std::fs;
use std::io::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{PolicyKind, RunConfig};
use crate::error::{Error, Result};
use crate::flow::CfmOptions;
use crate::latent::vae::{ActionVae, VaeBatch, VaeDims};
use crate::numerics::array::DenseArray;
use crate::numerics::checkpoint::Checkpoint;
use crate::numerics::normalize::NormStats;
use crate::numerics::optim::{AdamW, EmaShadow};
use crate::numerics::params::ParamStore;
use crate::numerics::rng::RngStreams;
use crate::numerics::tape::Tape;

use super::{
    batch_films, build_flow_stack, build_vae, build_windows, group_scene, load_demos, RunPaths,
    SceneTensors, WindowSet,
};

/// Summary returned by [`cmd_train_latent`].
#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub epochs: usize,
    pub first_recon: f64,
    pub final_recon: f64,
    pub frozen_hash: String,
    pub val_loss: f64,
}

/// Summary returned by [`cmd_train_flow`].
#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub epochs: usize,
    pub first_fm: f64,
    pub final_fm: f64,
    pub freeze_checks: usize,
}

/// Validation rows are every eighth window; the rest train.
fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::with_capacity(n);
    let mut val = Vec::with_capacity(n / 8 + 1);
    for i in 0..n {
        if i % 8 == 7 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    if val.is_empty() {
        // Tiny sets still need one held-out row for the reload check.
        val.push(train.pop().expect("at least two windows"));
    }
    (train, val)
}

fn gather_rows(src: &DenseArray, idx: &[usize]) -> DenseArray {
    let w = src.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        out.extend_from_slice(&src.values()[i * w..(i + 1) * w]);
    }
    DenseArray::new(vec![idx.len(), w], out)
}

fn vae_batch_for(windows: &WindowSet, idx: &[usize], dims: &VaeDims) -> Result<VaeBatch> {
    VaeBatch::new(gather_rows(&windows.actions, idx), gather_rows(&windows.contexts, idx), dims)
}

/// Deterministic in-place shuffle driven by a named stream.
fn shuffle(idx: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
}

/// Cosine decay from `base` to a 5% floor across `total` steps.
fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    base * (0.5 * (1.0 + (std::f64::consts::PI * frac).cos())).max(0.05)
}

/// Mean-decoded loss on a held-out batch; used to verify checkpoint reloads
/// reproduce training exactly.
pub fn stage1_validation_loss(
    cfg: &RunConfig,
    vae: &ActionVae,
    store: &ParamStore,
    batch: &VaeBatch,
) -> Result<f64> {
    let mut tape = Tape::new();
    let nodes = vae.loss_graph(&mut tape, store, batch, None, cfg.lambda_kl, cfg.lambda_smooth)?;
    Ok(tape.value(nodes.total).values()[0])
}

/// Train the variational action model on the run's demo windows.
pub fn cmd_train_latent(cfg: &RunConfig, runs_root: &std::path::Path) -> Result<Stage1Outcome> {
    let paths = RunPaths::new(runs_root, cfg);
    let demos = load_demos(&paths)?;
    let windows = build_windows(&demos, cfg)?;
    let dims = VaeDims::from_config(cfg);
    let (train_idx, val_idx) = split_indices(windows.len());
    let val_batch = vae_batch_for(&windows, &val_idx, &dims)?;

    let streams = RngStreams::new(cfg.seed);
    let mut store = ParamStore::new();
    let vae = build_vae(cfg, &mut store, &streams);
    let ids = store.ids();
    let mut opt =
        AdamW::with_hyperparams(&store, cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay);
    let mut ema = EmaShadow::new(&store, cfg.ema_decay)?;
    let mut order_rng = streams.stream("stage1-order");
    let mut noise_rng = streams.stream("stage1-noise");

    let warm_epochs = ((cfg.kl_warmup_frac * cfg.epochs as f64).round() as usize).max(1);
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size).max(1);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut curves = String::from("epoch,recon,kl,smooth,total,lambda_kl,lr\n");
    let mut order = train_idx.clone();
    let mut first_recon = f64::NAN;
    let mut final_recon = f64::NAN;
    let (k, d_z) = (dims.k, dims.d_z);

    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut order_rng);
        let lam_kl = cfg.lambda_kl * ((epoch + 1) as f64 / warm_epochs as f64).min(1.0);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = vae_batch_for(&windows, chunk, &dims)?;
            let b = batch.len();
            let eps: Vec<f64> =
                (0..b * k * d_z).map(|_| StandardNormal.sample(&mut noise_rng)).collect();
            let eps = DenseArray::new(vec![b * k, d_z], eps);
            let mut tape = Tape::new();
            let nodes =
                vae.loss_graph(&mut tape, &store, &batch, Some(&eps), lam_kl, cfg.lambda_smooth)?;
            let total = tape.value(nodes.total).values()[0];
            if !total.is_finite() {
                return Err(Error::Diverged(format!(
                    "stage-1 loss {total} at epoch {epoch}, batch {bi}; last-good checkpoint kept"
                )));
            }
            sums[0] += tape.value(nodes.recon).values()[0];
            sums[1] += tape.value(nodes.kl).values()[0];
            sums[2] += tape.value(nodes.smooth).values()[0];
            sums[3] += total;
            let mut grads = tape.backward(nodes.total)?;
            grads.clip_global_norm(&ids, cfg.grad_clip);
            opt.lr = cosine_lr(cfg.lr, epoch * steps_per_epoch + bi, total_steps);
            opt.step(&mut store, &grads)?;
            ema.update(&store);
            batches += 1;
        }
        let inv = 1.0 / batches as f64;
        let (recon, kl, smooth, total) =
            (sums[0] * inv, sums[1] * inv, sums[2] * inv, sums[3] * inv);
        if epoch == 0 {
            first_recon = recon;
        }
        final_recon = recon;
        curves.push_str(&format!(
            "{epoch},{recon:.6e},{kl:.6e},{smooth:.6e},{total:.6e},{lam_kl:.6e},{:.6e}\n",
            opt.lr
        ));
        fs::write(paths.stage1_curves(), &curves)?;

        // Serializing every epoch costs more wall time than the optimizer
        // steps for small models; a coarse cadence still leaves a recent
        // last-good checkpoint if a later epoch diverges.
        if (epoch + 1) % 10 == 0 || epoch + 1 == cfg.epochs {
            let mut ckpt = Checkpoint::new(cfg, store.clone());
            ckpt.epoch = epoch + 1;
            ckpt.save(&paths.stage1())?;
        }
    }

    // Final weights are the EMA shadow; the frozen hash pins them for
    // stage 2.
    ema.apply_to(&mut store);
    let frozen_hash = store.content_hash();
    let mut ckpt = Checkpoint::new(cfg, store.clone());
    ckpt.epoch = cfg.epochs;
    ckpt.frozen_hash = Some(frozen_hash.clone());
    ckpt.save(&paths.stage1())?;

    let val_loss = stage1_validation_loss(cfg, &vae, &store, &val_batch)?;
    Ok(Stage1Outcome { epochs: cfg.epochs, first_recon, final_recon, frozen_hash, val_loss })
}

/// Rebuild the stage-1 model/weights from its checkpoint, verifying that it
/// belongs to `cfg` and that the stored weights still hash to the frozen
/// hash they were saved under.
pub fn rebuild_vae(cfg: &RunConfig, path: &std::path::Path) -> Result<(ActionVae, ParamStore, String)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.config_hash != cfg.hash() {
        return Err(Error::ConfigHashMismatch { stored: ckpt.config_hash, actual: cfg.hash() });
    }
    let frozen = ckpt.frozen_hash.clone().ok_or_else(|| {
        Error::Checkpoint("stage-1 checkpoint lacks a frozen hash (training incomplete?)".into())
    })?;
    let streams = RngStreams::new(cfg.seed);
    let mut store = ParamStore::new();
    let vae = build_vae(cfg, &mut store, &streams);
    store.copy_values_from(&ckpt.params);
    let actual = store.content_hash();
    if actual != frozen {
        return Err(Error::FrozenWeightsChanged { expected: frozen, actual });
    }
    Ok((vae, store, frozen))
}

/// Per-window flow-training data: normalized targets plus per-window
/// conditioning handles.
struct FlowDataset {
    /// `[n, D]` normalized target rows.
    targets: DenseArray,
    norm: NormStats,
    scene_by_demo: Vec<SceneTensors>,
    demo_of: Vec<usize>,
    histories: Vec<Vec<f64>>,
}

impl FlowDataset {
    fn scenes_for<'a>(&'a self, idx: &[usize]) -> Vec<&'a SceneTensors> {
        idx.iter().map(|&i| &self.scene_by_demo[self.demo_of[i]]).collect()
    }

    fn histories_for<'a>(&'a self, idx: &[usize]) -> Vec<&'a [f64]> {
        idx.iter().map(|&i| self.histories[i].as_slice()).collect()
    }

    fn target_rows(&self, idx: &[usize]) -> DenseArray {
        gather_rows(&self.targets, idx)
    }
}

fn build_flow_dataset(
    cfg: &RunConfig,
    paths: &RunPaths,
    windows: WindowSet,
    demos: &[crate::simenv::expert::Demo],
) -> Result<(FlowDataset, Option<String>)> {
    let (raw_rows, frozen_hash) = match cfg.policy {
        PolicyKind::LatentFlow => {
            let (vae, vae_store, frozen) = rebuild_vae(cfg, &paths.stage1())?;
            let latents = vae.encode_windows(&vae_store, &windows.actions);
            (latents, Some(frozen))
        }
        PolicyKind::RawFlow => (windows.actions.clone(), None),
    };
    let w = raw_rows.shape()[1];
    let rows: Vec<Vec<f64>> =
        (0..raw_rows.shape()[0]).map(|i| raw_rows.values()[i * w..(i + 1) * w].to_vec()).collect();
    let norm = NormStats::fit(&rows)?;
    let mut flat = Vec::with_capacity(rows.len() * w);
    for r in &rows {
        flat.extend(norm.normalize(r));
    }
    let targets = DenseArray::new(vec![rows.len(), w], flat);

    let mut scene_by_demo = Vec::with_capacity(demos.len());
    for demo in demos {
        scene_by_demo.push(group_scene(&demo.cloud, cfg.fps_centers, cfg.neighbors)?);
    }
    Ok((
        FlowDataset {
            targets,
            norm,
            scene_by_demo,
            demo_of: windows.demo_of,
            histories: windows.histories,
        },
        frozen_hash,
    ))
}

/// Train the conditioned flow over the frozen window representation.
///
/// The run splits into two phases sharing one epoch budget: first the
/// velocity field is fit with the matching term alone on independent
/// base/target pairs, then base rows are re-paired with their own ODE
/// endpoints under the EMA teacher and the full loss (matching +
/// map-consistency) trains on those couplings. Training on self-generated
/// pairs is what makes the one-step map agree with the multi-step flow; the
/// loss itself is unchanged between phases except for the consistency
/// weight.
pub fn cmd_train_flow(cfg: &RunConfig, runs_root: &std::path::Path) -> Result<Stage2Outcome> {
    let paths = RunPaths::new(runs_root, cfg);
    let demos = load_demos(&paths)?;
    let windows = build_windows(&demos, cfg)?;
    let (data, frozen_hash) = build_flow_dataset(cfg, &paths, windows, &demos)?;
    let n = data.targets.shape()[0];
    let d = data.targets.shape()[1];

    // The frozen stage-1 store is reloaded fresh so its hash can be
    // re-asserted after every epoch of this stage.
    let vae_store = match cfg.policy {
        PolicyKind::LatentFlow => Some(rebuild_vae(cfg, &paths.stage1())?.1),
        PolicyKind::RawFlow => None,
    };

    let streams = RngStreams::new(cfg.seed);
    let mut store = ParamStore::new();
    let stack = build_flow_stack(cfg, &mut store, &streams);
    let ids = store.ids();
    let mut order_rng = streams.stream("stage2-order");
    let mut noise_rng = streams.stream("stage2-noise");

    let epochs_a = ((cfg.reflow_frac * cfg.epochs as f64).round() as usize).clamp(1, cfg.epochs);
    let epochs_b = cfg.epochs - epochs_a;
    let steps_per_epoch = n.div_ceil(cfg.batch_size).max(1);

    let mut curves_file = fs::File::create(paths.stage2_curves())?;
    writeln!(curves_file, "epoch,phase,fm,cons,vcons,total,lr")?;
    let mut first_fm = f64::NAN;
    let mut final_fm = f64::NAN;
    let mut freeze_checks = 0usize;
    let mut order: Vec<usize> = (0..n).collect();

    let check_freeze = || -> Result<()> {
        if let (Some(vs), Some(expect)) = (vae_store.as_ref(), frozen_hash.as_ref()) {
            let actual = vs.content_hash();
            if &actual != expect {
                return Err(Error::FrozenWeightsChanged { expected: expect.clone(), actual });
            }
        }
        Ok(())
    };

    // Phase one: matching term only, independent pairs.
    let mut opt = AdamW::with_hyperparams(&store, cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay);
    let mut ema = EmaShadow::new(&store, cfg.flow_ema_decay)?;
    for epoch in 0..epochs_a {
        shuffle(&mut order, &mut order_rng);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let latents = data.target_rows(chunk);
            let b = chunk.len();
            let noise: Vec<f64> =
                (0..b * d).map(|_| StandardNormal.sample(&mut noise_rng)).collect();
            let noise = DenseArray::new(vec![b, d], noise);
            let t1: Vec<f64> = (0..b).map(|_| noise_rng.gen_range(0.0..1.0)).collect();
            let mut tape = Tape::new();
            let films = batch_films(
                &mut tape,
                &store,
                &stack,
                cfg,
                &data.scenes_for(chunk),
                &data.histories_for(chunk),
            );
            let opts = CfmOptions {
                delta: cfg.consistency_delta,
                lambda_c: 0.0,
                alpha_vc: cfg.alpha_vel_consistency,
                films: Some(&films),
                ..CfmOptions::default()
            };
            let nodes = stack.model.cfm_loss_graph(&mut tape, &store, &latents, &noise, &t1, &opts)?;
            sums[0] += tape.value(nodes.fm).values()[0];
            sums[1] += tape.value(nodes.cons).values()[0];
            sums[2] += tape.value(nodes.vcons).values()[0];
            sums[3] += tape.value(nodes.total).values()[0];
            let mut grads = tape.backward(nodes.total)?;
            grads.clip_global_norm(&ids, cfg.grad_clip);
            opt.lr = cosine_lr(cfg.lr, epoch * steps_per_epoch + bi, epochs_a * steps_per_epoch);
            opt.step(&mut store, &grads)?;
            ema.update(&store);
            batches += 1;
        }
        let inv = 1.0 / batches as f64;
        if epoch == 0 {
            first_fm = sums[0] * inv;
        }
        final_fm = sums[0] * inv;
        writeln!(
            curves_file,
            "{epoch},a,{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
            sums[0] * inv,
            sums[1] * inv,
            sums[2] * inv,
            sums[3] * inv,
            opt.lr
        )?;
        check_freeze()?;
        freeze_checks += 1;
    }

    // Re-pair every window's base noise with its own ODE endpoint under the
    // phase-one EMA weights.
    ema.apply_to(&mut store);
    let mut pool_rng = streams.stream("stage2-synthesis");
    let pool_noise: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut pool_rng)).collect();
    let pool_noise = DenseArray::new(vec![n, d], pool_noise);
    let mut pool_target = vec![0.0; n * d];
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(128) {
        let noise_chunk = gather_rows(&pool_noise, chunk);
        let endpoint = stack.model.integrate_heun(
            &store,
            &noise_chunk,
            cfg.synthesis_ode_steps,
            |tape, s| {
                Some(batch_films(
                    tape,
                    s,
                    &stack,
                    cfg,
                    &data.scenes_for(chunk),
                    &data.histories_for(chunk),
                ))
            },
        )?;
        for (row_out, &i) in chunk.iter().enumerate() {
            pool_target[i * d..(i + 1) * d]
                .copy_from_slice(&endpoint.values()[row_out * d..(row_out + 1) * d]);
        }
    }
    let pool_target = DenseArray::new(vec![n, d], pool_target);

    // Phase two: full loss on the rectified couplings, fresh optimizer and
    // shadow, starting from the teacher weights.
    let mut opt = AdamW::with_hyperparams(&store, cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay);
    let mut ema = EmaShadow::new(&store, cfg.flow_ema_decay)?;
    for epoch in 0..epochs_b {
        shuffle(&mut order, &mut order_rng);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let latents = gather_rows(&pool_target, chunk);
            let noise = gather_rows(&pool_noise, chunk);
            let b = chunk.len();
            let t1: Vec<f64> = (0..b).map(|_| noise_rng.gen_range(0.0..1.0)).collect();
            let mut tape = Tape::new();
            let films = batch_films(
                &mut tape,
                &store,
                &stack,
                cfg,
                &data.scenes_for(chunk),
                &data.histories_for(chunk),
            );
            let opts = CfmOptions {
                delta: cfg.consistency_delta,
                lambda_c: cfg.lambda_consistency,
                alpha_vc: cfg.alpha_vel_consistency,
                films: Some(&films),
                ..CfmOptions::default()
            };
            let nodes = stack.model.cfm_loss_graph(&mut tape, &store, &latents, &noise, &t1, &opts)?;
            sums[0] += tape.value(nodes.fm).values()[0];
            sums[1] += tape.value(nodes.cons).values()[0];
            sums[2] += tape.value(nodes.vcons).values()[0];
            sums[3] += tape.value(nodes.total).values()[0];
            let mut grads = tape.backward(nodes.total)?;
            grads.clip_global_norm(&ids, cfg.grad_clip);
            opt.lr = cosine_lr(cfg.lr, epoch * steps_per_epoch + bi, epochs_b * steps_per_epoch);
            opt.step(&mut store, &grads)?;
            ema.update(&store);
            batches += 1;
        }
        let inv = 1.0 / batches as f64;
        final_fm = sums[0] * inv;
        writeln!(
            curves_file,
            "{},b,{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
            epochs_a + epoch,
            sums[0] * inv,
            sums[1] * inv,
            sums[2] * inv,
            sums[3] * inv,
            opt.lr
        )?;
        check_freeze()?;
        freeze_checks += 1;
    }
    if epochs_b > 0 {
        ema.apply_to(&mut store);
    }

    let mut ckpt = Checkpoint::new(cfg, store);
    ckpt.epoch = cfg.epochs;
    ckpt.norm_stats = Some(data.norm);
    ckpt.frozen_hash = frozen_hash;
    ckpt.save(&paths.stage2())?;

    Ok(Stage2Outcome { epochs: cfg.epochs, first_fm, final_fm, freeze_checks })
}

/// Rebuild the stage-2 flow stack from its checkpoint. The returned string
/// is the frozen stage-1 hash the flow was trained against (None for the
/// raw-action baseline), so loaders can refuse mixed checkpoint pairs.
pub fn rebuild_flow(
    cfg: &RunConfig,
    path: &std::path::Path,
) -> Result<(super::FlowStack, ParamStore, NormStats, Option<String>)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.config_hash != cfg.hash() {
        return Err(Error::ConfigHashMismatch { stored: ckpt.config_hash, actual: cfg.hash() });
    }
    let norm = ckpt
        .norm_stats
        .clone()
        .ok_or_else(|| Error::Checkpoint("stage-2 checkpoint lacks normalization stats".into()))?;
    let streams = RngStreams::new(cfg.seed);
    let mut store = ParamStore::new();
    let stack = build_flow_stack(cfg, &mut store, &streams);
    store.copy_values_from(&ckpt.params);
    Ok((stack, store, norm, ckpt.frozen_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::cmd_gen_demos;

    /// Shrunk-but-complete settings so a full two-stage run fits in a test.
    fn tiny_cfg() -> RunConfig {
        RunConfig {
            seed: 5,
            num_demos: 3,
            epochs: 4,
            batch_size: 32,
            lr: 1e-3,
            window_stride: 8,
            cloud_points: 64,
            fps_centers: 4,
            neighbors: 4,
            latent_dim: 4,
            embed_dim: 8,
            hidden_dim: 12,
            decoder_hidden: vec![12],
            velocity_hidden: vec![16, 16],
            time_embed_dim: 8,
            local_feat_dim: 8,
            center_feat_dim: 6,
            synthesis_ode_steps: 4,
            eval_seeds: 1,
            eval_trials: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn stage1_trains_writes_curves_and_reloads_to_the_same_validation_loss() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        cmd_gen_demos(&cfg, dir.path()).unwrap();
        let outcome = cmd_train_latent(&cfg, dir.path()).unwrap();
        assert!(outcome.final_recon < outcome.first_recon, "reconstruction must improve");

        let paths = RunPaths::new(dir.path(), &cfg);
        let curves = std::fs::read_to_string(paths.stage1_curves()).unwrap();
        assert_eq!(curves.lines().count(), 1 + cfg.epochs, "header plus one row per epoch");

        let (vae, store, frozen) = rebuild_vae(&cfg, &paths.stage1()).unwrap();
        assert_eq!(frozen, outcome.frozen_hash);
        let demos = load_demos(&paths).unwrap();
        let windows = build_windows(&demos, &cfg).unwrap();
        let dims = VaeDims::from_config(&cfg);
        let (_, val_idx) = split_indices(windows.len());
        let val = vae_batch_for(&windows, &val_idx, &dims).unwrap();
        let reloaded = stage1_validation_loss(&cfg, &vae, &store, &val).unwrap();
        assert_eq!(reloaded, outcome.val_loss, "reload must reproduce the exact loss");
    }

    #[test]
    fn stage2_trains_both_policies_and_pins_the_frozen_weights() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        cmd_gen_demos(&cfg, dir.path()).unwrap();
        cmd_train_latent(&cfg, dir.path()).unwrap();
        let outcome = cmd_train_flow(&cfg, dir.path()).unwrap();
        assert_eq!(outcome.freeze_checks, cfg.epochs, "hash asserted every epoch");
        assert!(outcome.final_fm < outcome.first_fm, "matching loss must drop");

        let paths = RunPaths::new(dir.path(), &cfg);
        let (stack, _store, norm, frozen) = rebuild_flow(&cfg, &paths.stage2()).unwrap();
        assert_eq!(stack.model.dims.state_dim(), cfg.num_chunks * cfg.latent_dim);
        assert_eq!(norm.dim(), cfg.num_chunks * cfg.latent_dim);
        assert!(frozen.is_some(), "latent flow records the frozen encoder hash");

        // The raw baseline trains the same architecture over action windows.
        let raw = RunConfig { policy: PolicyKind::RawFlow, ..cfg };
        cmd_gen_demos(&raw, dir.path()).unwrap();
        let outcome = cmd_train_flow(&raw, dir.path()).unwrap();
        assert!(outcome.final_fm < outcome.first_fm);
        let raw_paths = RunPaths::new(dir.path(), &raw);
        let (stack, _store, norm, frozen) = rebuild_flow(&raw, &raw_paths.stage2()).unwrap();
        assert_eq!(stack.model.dims.state_dim(), raw.horizon() * crate::simenv::ACTION_DIM);
        assert_eq!(norm.dim(), raw.horizon() * crate::simenv::ACTION_DIM);
        assert!(frozen.is_none(), "the raw baseline has nothing frozen");
    }

    #[test]
    fn tampered_stage1_weights_fail_the_freeze_check() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        cmd_gen_demos(&cfg, dir.path()).unwrap();
        cmd_train_latent(&cfg, dir.path()).unwrap();
        let paths = RunPaths::new(dir.path(), &cfg);
        let mut ckpt = Checkpoint::load(&paths.stage1()).unwrap();
        let id = ckpt.params.ids()[0];
        ckpt.params.value_mut(id).values_mut()[0] += 1e-3;
        ckpt.save(&paths.stage1()).unwrap();
        match cmd_train_flow(&cfg, dir.path()) {
            Err(Error::FrozenWeightsChanged { .. }) => {}
            other => panic!("expected a frozen-weight failure, got {other:?}"),
        }
    }
}
