//! Trajectory-level latent action representation.
//!
//! Action sequences are cut into fixed-length chunks, embedded with a small
//! temporal convolution, summarized by a GRU into a history-dependent latent
//! trajectory, and decoded back to actions by a FiLM-modulated MLP that can
//! take execution-time context into account.

pub mod vae;

pub use vae::{sample_latent, ActionVae, LatentCode, SampleMode, VaeBatch, VaeDims, VaeLossNodes};

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

/// A window of normalized controls, `horizon × action_dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTrajectory {
    pub actions: DenseArray,
    pub dt: f64,
}

impl ActionTrajectory {
    pub fn new(actions: DenseArray, dt: f64) -> Result<Self> {
        if actions.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 0],
                got: actions.shape().to_vec(),
                context: "action trajectory must be horizon x action_dim".into(),
            });
        }
        Ok(Self { actions, dt })
    }

    pub fn horizon(&self) -> usize {
        self.actions.shape()[0]
    }

    pub fn action_dim(&self) -> usize {
        self.actions.shape()[1]
    }
}

/// One of the K consecutive, non-overlapping pieces of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    /// `chunk_len × action_dim` slice of the source trajectory.
    pub actions: DenseArray,
    /// Position within the trajectory, 0-based.
    pub index: usize,
}

/// Cut a trajectory into `horizon / chunk_len` ordered chunks. The horizon
/// must divide evenly — padding is the caller's decision, never done here.
pub fn chunk_trajectory(traj: &ActionTrajectory, chunk_len: usize) -> Result<Vec<ActionChunk>> {
    let h = traj.horizon();
    let d = traj.action_dim();
    if chunk_len == 0 || h % chunk_len != 0 {
        return Err(Error::ChunkMismatch { len: h, chunk: chunk_len });
    }
    let k = h / chunk_len;
    let mut chunks = Vec::with_capacity(k);
    for i in 0..k {
        let start = i * chunk_len * d;
        let values = traj.actions.values()[start..start + chunk_len * d].to_vec();
        chunks.push(ActionChunk {
            actions: DenseArray::new(vec![chunk_len, d], values),
            index: i,
        });
    }
    Ok(chunks)
}

/// Stitch chunks back together in index order. Inverse of `chunk_trajectory`.
pub fn concat_chunks(chunks: &[ActionChunk], dt: f64) -> Result<ActionTrajectory> {
    if chunks.is_empty() {
        return Err(Error::InvalidArgument("cannot concatenate zero chunks".into()));
    }
    let d = chunks[0].actions.shape()[1];
    let mut values = Vec::new();
    for (i, ch) in chunks.iter().enumerate() {
        if ch.index != i {
            return Err(Error::InvalidArgument(format!(
                "chunk {i} carries index {}, expected {i}",
                ch.index
            )));
        }
        values.extend_from_slice(ch.actions.values());
    }
    let h = values.len() / d;
    ActionTrajectory::new(DenseArray::new(vec![h, d], values), dt)
}

/// Execution-time context vector: a presence flag followed by the goal offset
/// and nearest-obstacle offset in the end-effector frame. Absence is the
/// all-zeros vector, never missing data.
pub fn absent_context(d_v: usize) -> Vec<f64> {
    vec![0.0; d_v]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStreams;
    use rand::Rng;

    fn traj(h: usize, d: usize, seed: u64) -> ActionTrajectory {
        let streams = RngStreams::new(seed);
        let mut rng = streams.stream("chunk-test");
        let values = (0..h * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ActionTrajectory::new(DenseArray::new(vec![h, d], values), 0.05).unwrap()
    }

    #[test]
    fn eight_steps_in_pairs_gives_four_chunks() {
        let t = traj(8, 3, 1);
        let chunks = chunk_trajectory(&t, 2).unwrap();
        assert_eq!(chunks.len(), 4);
        for (i, ch) in chunks.iter().enumerate() {
            assert_eq!(ch.actions.shape(), &[2, 3]);
            assert_eq!(ch.index, i);
        }
    }

    #[test]
    fn chunk_equal_to_horizon_is_the_identity_partition() {
        let t = traj(4, 2, 2);
        let chunks = chunk_trajectory(&t, 4).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].actions, t.actions);
    }

    #[test]
    fn indivisible_horizon_is_rejected() {
        let t = traj(6, 2, 3);
        assert!(matches!(
            chunk_trajectory(&t, 4),
            Err(Error::ChunkMismatch { len: 6, chunk: 4 })
        ));
        assert!(chunk_trajectory(&t, 0).is_err());
    }

    #[test]
    fn partition_round_trips_exactly() {
        for seed in 0..20 {
            let t = traj(16, 4, seed);
            let chunks = chunk_trajectory(&t, 4).unwrap();
            let back = concat_chunks(&chunks, t.dt).unwrap();
            assert_eq!(back.actions.values(), t.actions.values(), "bit-exact round trip");
            assert_eq!(back.actions.shape(), t.actions.shape());
        }
    }

    #[test]
    fn out_of_order_chunks_are_rejected() {
        let t = traj(8, 2, 5);
        let mut chunks = chunk_trajectory(&t, 2).unwrap();
        chunks.swap(1, 2);
        assert!(concat_chunks(&chunks, t.dt).is_err());
    }
}
