//! Learned scene conditioning: a dual-branch point encoder (local offsets +
//! global center layout) and the two conditioning MLPs that turn branch
//! features into per-layer FiLM modulation of a target network.

use rand::Rng;

use crate::numerics::array::DenseArray;
use crate::numerics::init::{const_bias, linear_weight, zero_bias};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tape::{NodeId, Tape};

/// Dual-branch encoder parameters. The local branch runs a shared per-point
/// MLP with a residual block over neighborhood offsets and pools with
/// concat(max, mean); the center branch runs a per-center MLP and mean-pools.
#[derive(Debug, Clone)]
pub struct SceneEncoder {
    pub local_dim: usize,
    pub center_dim: usize,
    local_w1: ParamId,
    local_b1: ParamId,
    local_w2: ParamId,
    local_b2: ParamId,
    center_w1: ParamId,
    center_b1: ParamId,
    center_w2: ParamId,
    center_b2: ParamId,
}

impl SceneEncoder {
    /// `prefix` namespaces the parameters (e.g. "scene"). `local_dim` must be
    /// even: the pooled feature is concat(max, mean) of width local_dim/2.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        local_dim: usize,
        center_dim: usize,
    ) -> Self {
        assert!(local_dim % 2 == 0, "local feature dim must be even");
        let w = local_dim / 2;
        Self {
            local_dim,
            center_dim,
            local_w1: store.register(&format!("{prefix}.local.w1"), linear_weight(rng, 3, w)),
            local_b1: store.register(&format!("{prefix}.local.b1"), zero_bias(w)),
            local_w2: store.register(&format!("{prefix}.local.w2"), linear_weight(rng, w, w)),
            local_b2: store.register(&format!("{prefix}.local.b2"), zero_bias(w)),
            center_w1: store
                .register(&format!("{prefix}.center.w1"), linear_weight(rng, 3, center_dim)),
            center_b1: store.register(&format!("{prefix}.center.b1"), zero_bias(center_dim)),
            center_w2: store.register(
                &format!("{prefix}.center.w2"),
                linear_weight(rng, center_dim, center_dim),
            ),
            center_b2: store.register(&format!("{prefix}.center.b2"), zero_bias(center_dim)),
        }
    }

    /// Encode neighborhood offsets for a batch of scenes.
    ///
    /// `offsets` has one row per point, grouped as scenes × centers ×
    /// neighbors: shape [(n_scenes·k·m), 3]. Returns f_l of shape
    /// [n_scenes, local_dim].
    pub fn encode_local(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        offsets: NodeId,
        centers_per_scene: usize,
        neighbors: usize,
    ) -> NodeId {
        let w1 = tape.param(store, self.local_w1);
        let b1 = tape.param(store, self.local_b1);
        let w2 = tape.param(store, self.local_w2);
        let b2 = tape.param(store, self.local_b2);

        let h = tape.matmul(offsets, w1);
        let h = tape.add_bias(h, b1);
        let h0 = tape.tanh(h);
        // Residual block over the shared per-point features.
        let r = tape.matmul(h0, w2);
        let r = tape.add_bias(r, b2);
        let r = tape.tanh(r);
        let h1 = tape.add(h0, r);

        let maxed = tape.group_max(h1, neighbors);
        let meaned = tape.group_mean(h1, neighbors);
        let per_center = tape.concat_cols(&[maxed, meaned]);
        tape.group_mean(per_center, centers_per_scene)
    }

    /// Encode center coordinates for a batch of scenes.
    ///
    /// `centers` has shape [(n_scenes·k), 3]; returns f_c of shape
    /// [n_scenes, center_dim].
    pub fn encode_center(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        centers: NodeId,
        centers_per_scene: usize,
    ) -> NodeId {
        let w1 = tape.param(store, self.center_w1);
        let b1 = tape.param(store, self.center_b1);
        let w2 = tape.param(store, self.center_w2);
        let b2 = tape.param(store, self.center_b2);

        let h = tape.matmul(centers, w1);
        let h = tape.add_bias(h, b1);
        let h = tape.tanh(h);
        let h = tape.matmul(h, w2);
        let h = tape.add_bias(h, b2);
        let h = tape.tanh(h);
        tape.group_mean(h, centers_per_scene)
    }
}

/// Conditioning MLP emitting per-layer FiLM parameters for a target network:
/// one shared hidden layer, then a (γ, β) head pair per modulated layer.
/// γ heads start as the constant 1 and β heads as the constant 0 (zero
/// weights, fixed bias), so modulation is exactly the identity until the
/// first optimizer step moves the heads.
#[derive(Debug, Clone)]
pub struct FilmConditioner {
    pub layer_widths: Vec<usize>,
    hidden_w: ParamId,
    hidden_b: ParamId,
    gamma_heads: Vec<(ParamId, ParamId)>,
    beta_heads: Vec<(ParamId, ParamId)>,
}

impl FilmConditioner {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        in_dim: usize,
        hidden_dim: usize,
        layer_widths: &[usize],
    ) -> Self {
        let hidden_w =
            store.register(&format!("{prefix}.hidden.w"), linear_weight(rng, in_dim, hidden_dim));
        let hidden_b = store.register(&format!("{prefix}.hidden.b"), zero_bias(hidden_dim));
        let mut gamma_heads = Vec::new();
        let mut beta_heads = Vec::new();
        for (i, &width) in layer_widths.iter().enumerate() {
            gamma_heads.push((
                store.register(
                    &format!("{prefix}.gamma{i}.w"),
                    DenseArray::zeros(&[hidden_dim, width]),
                ),
                store.register(&format!("{prefix}.gamma{i}.b"), const_bias(width, 1.0)),
            ));
            beta_heads.push((
                store.register(
                    &format!("{prefix}.beta{i}.w"),
                    DenseArray::zeros(&[hidden_dim, width]),
                ),
                store.register(&format!("{prefix}.beta{i}.b"), zero_bias(width)),
            ));
        }
        Self { layer_widths: layer_widths.to_vec(), hidden_w, hidden_b, gamma_heads, beta_heads }
    }

    /// Produce per-layer (γ, β) pairs for a batch of conditioning rows
    /// [n, in_dim]; each γ/β has shape [n, layer_width].
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cond: NodeId,
    ) -> Vec<(NodeId, NodeId)> {
        let hw = tape.param(store, self.hidden_w);
        let hb = tape.param(store, self.hidden_b);
        let h = tape.matmul(cond, hw);
        let h = tape.add_bias(h, hb);
        let h = tape.tanh(h);
        self.gamma_heads
            .iter()
            .zip(&self.beta_heads)
            .map(|(&(gw, gb), &(bw, bb))| {
                let gwn = tape.param(store, gw);
                let gbn = tape.param(store, gb);
                let bwn = tape.param(store, bw);
                let bbn = tape.param(store, bb);
                let g = tape.matmul(h, gwn);
                let g = tape.add_bias(g, gbn);
                let b = tape.matmul(h, bwn);
                let b = tape.add_bias(b, bbn);
                (g, b)
            })
            .collect()
    }
}

/// Two-stage FiLM: h'' = γ_c ⊙ (γ_l ⊙ h + β_l) + β_c, local strictly first.
/// All operands share the shape [batch, width].
pub fn film_hierarchical(
    tape: &mut Tape,
    h: NodeId,
    local: (NodeId, NodeId),
    center: (NodeId, NodeId),
) -> NodeId {
    let (gl, bl) = local;
    let (gc, bc) = center;
    let hl = tape.mul(gl, h);
    let hl = tape.add(hl, bl);
    let hc = tape.mul(gc, hl);
    tape.add(hc, bc)
}

/// Single-stage FiLM: γ ⊙ h + β (used by the action decoder).
pub fn film_single(tape: &mut Tape, h: NodeId, params: (NodeId, NodeId)) -> NodeId {
    let (g, b) = params;
    let hm = tape.mul(g, h);
    tape.add(hm, b)
}
