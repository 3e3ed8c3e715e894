//! Run configuration: one serializable struct holding every hyperparameter,
//! hashed to name run directories and to bind checkpoints/reports to the
//! exact settings that produced them.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Reach,
    ObstacleReach,
    PickPlace,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Reach => "reach",
            Task::ObstacleReach => "obstacle-reach",
            Task::PickPlace => "pick-place",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "reach" => Some(Task::Reach),
            "obstacle-reach" => Some(Task::ObstacleReach),
            "pick-place" => Some(Task::PickPlace),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Flow model over the frozen latent trajectory space, decoded per chunk.
    LatentFlow,
    /// Identical flow architecture trained directly on normalized action
    /// windows (the baseline).
    RawFlow,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::LatentFlow => "latent-flow",
            PolicyKind::RawFlow => "raw-flow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "latent-flow" => Some(PolicyKind::LatentFlow),
            "raw-flow" => Some(PolicyKind::RawFlow),
            _ => None,
        }
    }
}

/// All hyperparameters for a run. Serialized verbatim into every checkpoint
/// and report; the SHA-256 of its canonical JSON names the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // ---- run identity ----
    pub task: Task,
    pub policy: PolicyKind,
    pub seed: u64,

    // ---- demonstrations ----
    /// Expert demonstrations collected per task.
    pub num_demos: usize,
    /// Std of Gaussian noise added to expert actions (0 = clean expert).
    pub noise_level: f64,

    // ---- optimization (shared by both training stages) ----
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub grad_clip: f64,

    // ---- latent action model ----
    /// Steps per chunk (c); also the number of steps executed per
    /// receding-horizon cycle.
    pub chunk_len: usize,
    /// Chunks per trajectory window (K); window horizon H = K·c.
    pub num_chunks: usize,
    /// Stride between consecutive training windows cut from a demonstration.
    pub window_stride: usize,
    /// Latent code width d_z.
    pub latent_dim: usize,
    /// Chunk embedding width d_x.
    pub embed_dim: usize,
    /// Recurrent hidden width d_h.
    pub hidden_dim: usize,
    pub decoder_hidden: Vec<usize>,
    pub lambda_kl: f64,
    /// Fraction of epochs over which λ_kl ramps linearly from 0.
    pub kl_warmup_frac: f64,
    pub lambda_smooth: f64,

    // ---- flow model ----
    pub velocity_hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub lambda_consistency: f64,
    pub consistency_delta: f64,
    /// Weight on the auxiliary velocity-agreement term (0 disables it).
    pub alpha_vel_consistency: f64,
    /// Time at which the one-step flow map is evaluated on the base sample.
    pub gen_time: f64,
    /// Number of most recent proprioceptive observations fed to the flow.
    pub history_len: usize,
    /// Fraction of the flow epochs spent fitting the field on independent
    /// base/target pairs before base→endpoint pairs are synthesized from it.
    pub reflow_frac: f64,
    /// ODE steps used when integrating the synthesis pairs.
    pub synthesis_ode_steps: usize,
    /// EMA decay for the flow-stage weight shadows (pair-synthesis teacher
    /// and final evaluation weights).
    pub flow_ema_decay: f64,

    // ---- scene geometry ----
    pub cloud_points: usize,
    pub fps_centers: usize,
    pub neighbors: usize,
    pub local_feat_dim: usize,
    pub center_feat_dim: usize,

    // ---- metrics ----
    /// High-frequency cutoff as a fraction of the Nyquist frequency.
    pub freq_cutoff_frac: f64,

    // ---- evaluation ----
    pub eval_seeds: usize,
    pub eval_trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Reach,
            policy: PolicyKind::LatentFlow,
            seed: 0,
            num_demos: 30,
            noise_level: 0.0,
            epochs: 150,
            batch_size: 96,
            lr: 1e-4,
            weight_decay: 1e-4,
            ema_decay: 0.95,
            grad_clip: 1.0,
            chunk_len: 4,
            num_chunks: 4,
            window_stride: 2,
            latent_dim: 16,
            embed_dim: 32,
            hidden_dim: 64,
            decoder_hidden: vec![64, 64],
            lambda_kl: 1e-3,
            kl_warmup_frac: 0.1,
            lambda_smooth: 1e-2,
            velocity_hidden: vec![256, 256],
            time_embed_dim: 32,
            lambda_consistency: 1.0,
            consistency_delta: 0.1,
            alpha_vel_consistency: 0.0,
            gen_time: 0.0,
            history_len: 2,
            reflow_frac: 0.5,
            synthesis_ode_steps: 32,
            flow_ema_decay: 0.999,
            cloud_points: 512,
            fps_centers: 16,
            neighbors: 16,
            local_feat_dim: 64,
            center_feat_dim: 32,
            freq_cutoff_frac: 0.25,
            eval_seeds: 3,
            eval_trials: 20,
        }
    }
}

impl RunConfig {
    /// Window horizon H = K·c.
    pub fn horizon(&self) -> usize {
        self.num_chunks * self.chunk_len
    }

    /// SHA-256 of the canonical JSON serialization. Field order is the
    /// struct declaration order, so the hash is stable for a given build.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        let mut s = String::with_capacity(64);
        for b in digest {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    /// Short prefix of [`RunConfig::hash`] used for run directory names.
    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        b.seed = 0;
        b.lambda_consistency = 0.5;
        assert_ne!(a.hash(), b.hash(), "loss weights must enter the hash");
        b.lambda_consistency = a.lambda_consistency;
        b.gen_time = 1.0;
        assert_ne!(a.hash(), b.hash(), "endpoint convention must enter the hash");
        b.gen_time = a.gen_time;
        b.reflow_frac = 0.25;
        assert_ne!(a.hash(), b.hash(), "training-phase split must enter the hash");
    }

    #[test]
    fn round_trips_through_json_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = RunConfig { seed: 7, task: Task::ObstacleReach, ..Default::default() };
        cfg.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(cfg, loaded);
        assert_eq!(cfg.hash(), loaded.hash());
    }

    #[test]
    fn horizon_is_chunks_times_chunk_len() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.horizon(), 16);
    }
}
