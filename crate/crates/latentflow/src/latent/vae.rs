//! Chunk VAE: temporal-conv chunk embedding, GRU encoder with variational
//! heads, and a FiLM-modulated MLP decoder conditioned on execution context.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::FilmConditioner;
use crate::numerics::array::DenseArray;
use crate::numerics::init::{linear_weight, zero_bias};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tape::{NodeId, Tape};

/// Log-variance clamp range; keeps σ in [e^−5, e^2].
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 4.0;

/// Model dimensions, decoupled from the run config so tests can build
/// miniature instances.
#[derive(Debug, Clone)]
pub struct VaeDims {
    /// Action dimension per step.
    pub d_a: usize,
    /// Execution-context dimension.
    pub d_v: usize,
    /// Steps per chunk.
    pub c: usize,
    /// Chunks per trajectory window.
    pub k: usize,
    /// Chunk embedding width.
    pub d_x: usize,
    /// GRU hidden width.
    pub d_h: usize,
    /// Latent code width.
    pub d_z: usize,
    /// Hidden width of the context-conditioning MLP.
    pub cond_hidden: usize,
    /// Decoder hidden layer widths (each gets its own FiLM modulation).
    pub decoder_hidden: Vec<usize>,
}

impl VaeDims {
    pub fn from_config(cfg: &crate::config::RunConfig) -> Self {
        Self {
            d_a: crate::simenv::ACTION_DIM,
            d_v: crate::simenv::CTX_DIM,
            c: cfg.chunk_len,
            k: cfg.num_chunks,
            d_x: cfg.embed_dim,
            d_h: cfg.hidden_dim,
            d_z: cfg.latent_dim,
            cond_hidden: 32,
            decoder_hidden: cfg.decoder_hidden.clone(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.k * self.c
    }
}

/// A batch of trajectory windows ready for the loss graph.
#[derive(Debug, Clone)]
pub struct VaeBatch {
    /// `[batch, horizon·d_a]` row-major flattened windows.
    pub actions: DenseArray,
    /// `[batch, d_v]` execution contexts, one per window.
    pub contexts: DenseArray,
}

impl VaeBatch {
    pub fn new(actions: DenseArray, contexts: DenseArray, dims: &VaeDims) -> Result<Self> {
        let b = actions.shape()[0];
        if actions.shape() != vec![b, dims.horizon() * dims.d_a] {
            return Err(Error::ShapeMismatch {
                expected: vec![b, dims.horizon() * dims.d_a],
                got: actions.shape().to_vec(),
                context: "VAE batch actions".into(),
            });
        }
        if contexts.shape() != vec![b, dims.d_v] {
            return Err(Error::ShapeMismatch {
                expected: vec![b, dims.d_v],
                got: contexts.shape().to_vec(),
                context: "VAE batch contexts".into(),
            });
        }
        Ok(Self { actions, contexts })
    }

    pub fn len(&self) -> usize {
        self.actions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One variational code: mean, log-variance, the noise actually drawn, and
/// the resulting sample.
#[derive(Debug, Clone)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub eps: Vec<f64>,
    pub sample: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

/// Reparameterized draw: train mode returns μ + exp(½·logvar)⊙ε with ε drawn
/// from `rng`; eval mode returns μ exactly (ε recorded as zeros).
pub fn sample_latent<R: Rng>(
    mu: &[f64],
    logvar: &[f64],
    mode: SampleMode,
    rng: &mut R,
) -> LatentCode {
    assert_eq!(mu.len(), logvar.len(), "mean/log-variance length mismatch");
    let eps: Vec<f64> = match mode {
        SampleMode::Eval => vec![0.0; mu.len()],
        SampleMode::Train => {
            use rand_distr::{Distribution, StandardNormal};
            (0..mu.len()).map(|_| StandardNormal.sample(rng)).collect()
        }
    };
    let sample = mu
        .iter()
        .zip(logvar)
        .zip(&eps)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    LatentCode { mu: mu.to_vec(), logvar: logvar.to_vec(), eps, sample }
}

/// Per-chunk encoder output on the tape.
#[derive(Debug, Clone, Copy)]
pub struct EncodedChunk {
    pub hidden: NodeId,
    pub mu: NodeId,
    pub logvar: NodeId,
}

/// Loss graph handles: total plus the three logged components and the
/// per-chunk means (used by the temporal-coherence probes).
#[derive(Debug, Clone)]
pub struct VaeLossNodes {
    pub total: NodeId,
    pub recon: NodeId,
    pub kl: NodeId,
    pub smooth: NodeId,
    pub mus: Vec<NodeId>,
}

/// The chunk VAE. All parameters live in a shared `ParamStore` under the
/// given prefix; graphs are rebuilt per step from the current values.
#[derive(Debug, Clone)]
pub struct ActionVae {
    pub dims: VaeDims,
    conv_ch: usize,
    conv_w: ParamId,
    conv_b: ParamId,
    embed_w: ParamId,
    embed_b: ParamId,
    gru_wr: ParamId,
    gru_ur: ParamId,
    gru_br: ParamId,
    gru_wu: ParamId,
    gru_uu: ParamId,
    gru_bu: ParamId,
    gru_wh: ParamId,
    gru_uh: ParamId,
    gru_bh: ParamId,
    mu_w: ParamId,
    mu_b: ParamId,
    lv_w: ParamId,
    lv_b: ParamId,
    dec_layers: Vec<(ParamId, ParamId)>,
    dec_out_w: ParamId,
    dec_out_b: ParamId,
    pub conditioner: FilmConditioner,
}

impl ActionVae {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, dims: VaeDims) -> Self {
        assert!(dims.d_x >= 2, "embedding width too small");
        let conv_ch = (dims.d_x / 2).max(1);
        let conv_w =
            store.register(&format!("{prefix}.conv.w"), linear_weight(rng, 3 * dims.d_a, conv_ch));
        let conv_b = store.register(&format!("{prefix}.conv.b"), zero_bias(conv_ch));
        let embed_w = store
            .register(&format!("{prefix}.embed.w"), linear_weight(rng, dims.c * conv_ch, dims.d_x));
        let embed_b = store.register(&format!("{prefix}.embed.b"), zero_bias(dims.d_x));

        let gate = |store: &mut ParamStore, rng: &mut R, name: &str| {
            (
                store.register(
                    &format!("{prefix}.gru.w{name}"),
                    linear_weight(rng, dims.d_x, dims.d_h),
                ),
                store.register(
                    &format!("{prefix}.gru.u{name}"),
                    linear_weight(rng, dims.d_h, dims.d_h),
                ),
                store.register(&format!("{prefix}.gru.b{name}"), zero_bias(dims.d_h)),
            )
        };
        let (gru_wr, gru_ur, gru_br) = gate(store, rng, "r");
        let (gru_wu, gru_uu, gru_bu) = gate(store, rng, "u");
        let (gru_wh, gru_uh, gru_bh) = gate(store, rng, "h");

        // Variational heads start at the prior: μ=0, logvar=0.
        let mu_w = store
            .register(&format!("{prefix}.head.mu.w"), DenseArray::zeros(&[dims.d_h, dims.d_z]));
        let mu_b = store.register(&format!("{prefix}.head.mu.b"), zero_bias(dims.d_z));
        let lv_w = store
            .register(&format!("{prefix}.head.logvar.w"), DenseArray::zeros(&[dims.d_h, dims.d_z]));
        let lv_b = store.register(&format!("{prefix}.head.logvar.b"), zero_bias(dims.d_z));

        let mut dec_layers = Vec::new();
        let mut in_dim = dims.d_z;
        for (i, &w) in dims.decoder_hidden.iter().enumerate() {
            dec_layers.push((
                store.register(&format!("{prefix}.dec.l{i}.w"), linear_weight(rng, in_dim, w)),
                store.register(&format!("{prefix}.dec.l{i}.b"), zero_bias(w)),
            ));
            in_dim = w;
        }
        let dec_out_w = store
            .register(&format!("{prefix}.dec.out.w"), linear_weight(rng, in_dim, dims.c * dims.d_a));
        let dec_out_b = store.register(&format!("{prefix}.dec.out.b"), zero_bias(dims.c * dims.d_a));

        let conditioner = FilmConditioner::new(
            store,
            rng,
            &format!("{prefix}.cond"),
            dims.d_v,
            dims.cond_hidden,
            &dims.decoder_hidden,
        );

        Self {
            dims,
            conv_ch,
            conv_w,
            conv_b,
            embed_w,
            embed_b,
            gru_wr,
            gru_ur,
            gru_br,
            gru_wu,
            gru_uu,
            gru_bu,
            gru_wh,
            gru_uh,
            gru_bh,
            mu_w,
            mu_b,
            lv_w,
            lv_b,
            dec_layers,
            dec_out_w,
            dec_out_b,
            conditioner,
        }
    }

    pub fn update_gate_bias(&self) -> ParamId {
        self.gru_bu
    }

    pub fn mu_head(&self) -> (ParamId, ParamId) {
        (self.mu_w, self.mu_b)
    }

    /// Kernel-3 same-padded temporal convolution written as a gather: one row
    /// per step holding [a_{t−1}, a_t, a_{t+1}] with zeros past the chunk
    /// edges. Input is `[n_windows, k·c·d_a]`; output `[n_windows·k·c, 3·d_a]`.
    pub fn im2col(&self, actions: &DenseArray) -> DenseArray {
        let (c, d_a, k) = (self.dims.c, self.dims.d_a, self.dims.k);
        let n = actions.shape()[0];
        assert_eq!(actions.shape()[1], k * c * d_a, "window width mismatch");
        let mut values = vec![0.0; n * k * c * 3 * d_a];
        for w in 0..n {
            let row = &actions.values()[w * k * c * d_a..(w + 1) * k * c * d_a];
            for ch in 0..k {
                for t in 0..c {
                    let out = ((w * k + ch) * c + t) * 3 * d_a;
                    for (tap, off) in [(-1i64, 0usize), (0, d_a), (1, 2 * d_a)] {
                        let tt = t as i64 + tap;
                        if tt < 0 || tt >= c as i64 {
                            continue; // zero padding at chunk edges
                        }
                        let src = (ch * c + tt as usize) * d_a;
                        values[out + off..out + off + d_a]
                            .copy_from_slice(&row[src..src + d_a]);
                    }
                }
            }
        }
        DenseArray::new(vec![n * k * c, 3 * d_a], values)
    }

    /// Embed every chunk of every window: conv (tanh) → flatten → affine.
    /// Returns `[n_windows·k, d_x]` with rows ordered (window, chunk).
    pub fn embed_chunks(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        im2col_rows: NodeId,
    ) -> NodeId {
        let n_steps = tape.value(im2col_rows).shape()[0];
        let n_chunks = n_steps / self.dims.c;
        let cw = tape.param(store, self.conv_w);
        let cb = tape.param(store, self.conv_b);
        let conv = tape.matmul(im2col_rows, cw);
        let conv = tape.add_bias(conv, cb);
        let conv = tape.tanh(conv);
        let flat = tape.reshape(conv, vec![n_chunks, self.dims.c * self.conv_ch]);
        let ew = tape.param(store, self.embed_w);
        let eb = tape.param(store, self.embed_b);
        let x = tape.matmul(flat, ew);
        tape.add_bias(x, eb)
    }

    /// One GRU step: reset gate r, update gate u, candidate ĥ, and
    /// h' = (1−u)⊙h + u⊙ĥ.
    pub fn gru_cell(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        h: NodeId,
    ) -> NodeId {
        let gate = |tape: &mut Tape, w, u, b, xx, hh| {
            let wn = tape.param(store, w);
            let un = tape.param(store, u);
            let bn = tape.param(store, b);
            let a = tape.matmul(xx, wn);
            let c = tape.matmul(hh, un);
            let s = tape.add(a, c);
            tape.add_bias(s, bn)
        };
        let r_pre = gate(tape, self.gru_wr, self.gru_ur, self.gru_br, x, h);
        let r = tape.sigmoid(r_pre);
        let u_pre = gate(tape, self.gru_wu, self.gru_uu, self.gru_bu, x, h);
        let u = tape.sigmoid(u_pre);
        let rh = tape.mul(r, h);
        let cand_pre = gate(tape, self.gru_wh, self.gru_uh, self.gru_bh, x, rh);
        let cand = tape.tanh(cand_pre);
        let keep = tape.affine(u, -1.0, 1.0); // 1 − u
        let kept = tape.mul(keep, h);
        let new = tape.mul(u, cand);
        tape.add(kept, new)
    }

    /// Run the GRU over the chunk sequence and apply the variational heads.
    /// `x_all` is `[b·k, d_x]` with rows ordered (window, chunk); the state
    /// starts at zero and chunk k's outputs depend only on chunks ≤ k.
    pub fn encode_sequence(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_all: NodeId,
        batch: usize,
    ) -> Vec<EncodedChunk> {
        let k = self.dims.k;
        assert_eq!(tape.value(x_all).shape()[0], batch * k, "row count mismatch");
        let mut h = tape.leaf(DenseArray::new(
            vec![batch, self.dims.d_h],
            vec![0.0; batch * self.dims.d_h],
        ));
        let mw = tape.param(store, self.mu_w);
        let mb = tape.param(store, self.mu_b);
        let lw = tape.param(store, self.lv_w);
        let lb = tape.param(store, self.lv_b);
        let mut out = Vec::with_capacity(k);
        for step in 0..k {
            let idx: Vec<usize> = (0..batch).map(|b| b * k + step).collect();
            let x = tape.gather_rows(x_all, &idx);
            h = self.gru_cell(tape, store, x, h);
            let mu_pre = tape.matmul(h, mw);
            let mu = tape.add_bias(mu_pre, mb);
            let lv_pre = tape.matmul(h, lw);
            let lv_pre = tape.add_bias(lv_pre, lb);
            let logvar = tape.clamp(lv_pre, LOGVAR_MIN, LOGVAR_MAX);
            out.push(EncodedChunk { hidden: h, mu, logvar });
        }
        out
    }

    /// Decode one latent per row back to a flattened chunk `[b, c·d_a]`.
    /// `films` carries per-hidden-layer (γ, β) rows from the conditioner;
    /// `None` runs the bare decoder. Modulation is applied to the
    /// pre-activation: tanh(γ⊙(hW+b)+β).
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: NodeId,
        films: Option<&[(NodeId, NodeId)]>,
    ) -> NodeId {
        self.decode_with_preacts(tape, store, z, films).0
    }

    /// Same as `decode` but also returns each hidden layer's post-modulation
    /// pre-activation, for probes of the modulation arithmetic.
    pub fn decode_with_preacts(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: NodeId,
        films: Option<&[(NodeId, NodeId)]>,
    ) -> (NodeId, Vec<NodeId>) {
        if let Some(f) = films {
            assert_eq!(f.len(), self.dec_layers.len(), "one (γ,β) pair per hidden layer");
        }
        let mut h = z;
        let mut preacts = Vec::new();
        for (i, &(w, b)) in self.dec_layers.iter().enumerate() {
            let wn = tape.param(store, w);
            let bn = tape.param(store, b);
            let lin = tape.matmul(h, wn);
            let mut pre = tape.add_bias(lin, bn);
            if let Some(f) = films {
                let (gamma, beta) = f[i];
                let scaled = tape.mul(gamma, pre);
                pre = tape.add(scaled, beta);
            }
            preacts.push(pre);
            h = tape.tanh(pre);
        }
        let ow = tape.param(store, self.dec_out_w);
        let ob = tape.param(store, self.dec_out_b);
        let out = tape.matmul(h, ow);
        (tape.add_bias(out, ob), preacts)
    }

    /// Build the full training loss: reconstruction MSE + λ_kl·KL +
    /// λ_sm·latent smoothness, each also returned separately. `eps` supplies
    /// the reparameterization noise (`[b·k, d_z]`, rows ordered like chunks);
    /// `None` decodes the means (deterministic evaluation).
    pub fn loss_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &VaeBatch,
        eps: Option<&DenseArray>,
        lambda_kl: f64,
        lambda_sm: f64,
    ) -> Result<VaeLossNodes> {
        let b = batch.len();
        let (k, c, d_a, d_z) = (self.dims.k, self.dims.c, self.dims.d_a, self.dims.d_z);
        if let Some(e) = eps {
            if e.shape() != vec![b * k, d_z] {
                return Err(Error::ShapeMismatch {
                    expected: vec![b * k, d_z],
                    got: e.shape().to_vec(),
                    context: "reparameterization noise".into(),
                });
            }
        }

        let cols = tape.leaf(self.im2col(&batch.actions));
        let x_all = self.embed_chunks(tape, store, cols);
        let codes = self.encode_sequence(tape, store, x_all, b);
        let ctx = tape.leaf(batch.contexts.clone());
        let films = self.conditioner.forward(tape, store, ctx);

        let mut recon_sum: Option<NodeId> = None;
        let mut kl_sum: Option<NodeId> = None;
        let mut mus = Vec::with_capacity(k);
        for (step, code) in codes.iter().enumerate() {
            mus.push(code.mu);
            // z = μ + exp(½·logvar)⊙ε, or plain μ when no noise is supplied.
            let z = match eps {
                Some(e) => {
                    let mut noise = vec![0.0; b * d_z];
                    for bb in 0..b {
                        let src = (bb * k + step) * d_z;
                        noise[bb * d_z..(bb + 1) * d_z]
                            .copy_from_slice(&e.values()[src..src + d_z]);
                    }
                    let eps_k = tape.leaf(DenseArray::new(vec![b, d_z], noise));
                    let half_lv = tape.scale(code.logvar, 0.5);
                    let sigma = tape.exp(half_lv);
                    let scaled = tape.mul(sigma, eps_k);
                    tape.add(code.mu, scaled)
                }
                None => code.mu,
            };
            let decoded = self.decode(tape, store, z, Some(&films));

            let mut truth = vec![0.0; b * c * d_a];
            for bb in 0..b {
                let src = bb * (k * c * d_a) + step * c * d_a;
                truth[bb * c * d_a..(bb + 1) * c * d_a]
                    .copy_from_slice(&batch.actions.values()[src..src + c * d_a]);
            }
            let truth = tape.leaf(DenseArray::new(vec![b, c * d_a], truth));
            let diff = tape.sub(decoded, truth);
            let sq = tape.mul(diff, diff);
            let s = tape.sum_all(sq);
            recon_sum = Some(match recon_sum {
                Some(acc) => tape.add(acc, s),
                None => s,
            });

            // Closed-form Gaussian KL to the unit prior:
            // 0.5·Σ(μ² + e^logvar − 1 − logvar).
            let mu2 = tape.mul(code.mu, code.mu);
            let elv = tape.exp(code.logvar);
            let a = tape.add(mu2, elv);
            let neg = tape.affine(code.logvar, -1.0, -1.0);
            let term = tape.add(a, neg);
            let ks = tape.sum_all(term);
            let ks = tape.scale(ks, 0.5);
            kl_sum = Some(match kl_sum {
                Some(acc) => tape.add(acc, ks),
                None => ks,
            });
        }

        let recon = tape.scale(recon_sum.expect("k >= 1"), 1.0 / (b * k * c * d_a) as f64);
        let kl = tape.scale(kl_sum.expect("k >= 1"), 1.0 / (b * k) as f64);

        let smooth = if k > 1 {
            let mut acc: Option<NodeId> = None;
            for pair in mus.windows(2) {
                let d = tape.sub(pair[1], pair[0]);
                let sq = tape.mul(d, d);
                let s = tape.sum_all(sq);
                acc = Some(match acc {
                    Some(a) => tape.add(a, s),
                    None => s,
                });
            }
            tape.scale(acc.unwrap(), 1.0 / (b * (k - 1)) as f64)
        } else {
            tape.scalar(0.0)
        };

        let kl_w = tape.scale(kl, lambda_kl);
        let sm_w = tape.scale(smooth, lambda_sm);
        let t1 = tape.add(recon, kl_w);
        let total = tape.add(t1, sm_w);
        let v = tape.value(total).values()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("VAE loss is {v}")));
        }
        Ok(VaeLossNodes { total, recon, kl, smooth, mus })
    }

    /// Deterministic window encoding for downstream stages: runs a scratch
    /// tape in eval mode (z = μ) and returns the per-chunk means flattened to
    /// `[n_windows, k·d_z]`.
    pub fn encode_windows(&self, store: &ParamStore, actions: &DenseArray) -> DenseArray {
        let n = actions.shape()[0];
        let (k, d_z) = (self.dims.k, self.dims.d_z);
        let mut tape = Tape::new();
        let cols = tape.leaf(self.im2col(actions));
        let x_all = self.embed_chunks(&mut tape, store, cols);
        let codes = self.encode_sequence(&mut tape, store, x_all, n);
        let mut out = vec![0.0; n * k * d_z];
        for (step, code) in codes.iter().enumerate() {
            let mu = tape.value(code.mu);
            for w in 0..n {
                out[w * k * d_z + step * d_z..w * k * d_z + (step + 1) * d_z]
                    .copy_from_slice(&mu.values()[w * d_z..(w + 1) * d_z]);
            }
        }
        DenseArray::new(vec![n, k * d_z], out)
    }

    /// Decode a full window of latents `[k·d_z]` under one context, returning
    /// `[horizon, d_a]` actions. Used by the receding-horizon controller.
    pub fn decode_window(&self, store: &ParamStore, latents: &[f64], ctx: &[f64]) -> DenseArray {
        let (k, c, d_a, d_z) = (self.dims.k, self.dims.c, self.dims.d_a, self.dims.d_z);
        assert_eq!(latents.len(), k * d_z, "latent window length");
        assert_eq!(ctx.len(), self.dims.d_v, "context length");
        let mut tape = Tape::new();
        let z = tape.leaf(DenseArray::new(vec![k, d_z], latents.to_vec()));
        let mut ctx_rows = Vec::with_capacity(k * ctx.len());
        for _ in 0..k {
            ctx_rows.extend_from_slice(ctx);
        }
        let ctx_node = tape.leaf(DenseArray::new(vec![k, self.dims.d_v], ctx_rows));
        let films = self.conditioner.forward(&mut tape, store, ctx_node);
        let out = self.decode(&mut tape, store, z, Some(&films));
        DenseArray::new(vec![k * c, d_a], tape.value(out).values().to_vec())
    }
}
