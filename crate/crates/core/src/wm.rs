//! Recurrent state-space world model: two convolutional view encoders fused
//! into one embedding, a GRU-style recurrent core, categorical prior and
//! posterior heads sampled with straight-through gradients, and per-view
//! deconvolutional decoders. Trained by reconstruction plus a KL-balanced
//! categorical divergence on subsequences of play data.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Episode};
use crate::env::{Observation, ACTION_DIM, GRIP_RES, STATIC_RES};
use crate::error::{Error, Result};
use crate::graph::{GradStore, Graph, Var};
use crate::io::Container;
use crate::nn::{Activation, Conv2d, ConvTranspose2d, GruCell, Linear, Mlp, ParamSet};
use crate::opt::Adam;
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RssmConfig {
    /// Deterministic recurrent state size H.
    pub deter_dim: usize,
    /// Number of categorical latent variables D.
    pub z_vars: usize,
    /// Classes per categorical variable C.
    pub z_classes: usize,
    /// Width of the fused observation embedding.
    pub embed_dim: usize,
    /// Channels of the two conv stages in each view encoder/decoder.
    pub conv_channels: (usize, usize),
    /// Hidden width of the prior/posterior heads.
    pub head_hidden: usize,
    /// KL loss scale β.
    pub beta: f64,
    /// KL balancing coefficient δ.
    pub delta: f64,
    /// Recurrent-state reset probability ζ (per sequence position).
    pub zeta: f64,
    /// Training subsequence length L.
    pub seq_len: usize,
    /// Training batch size B.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub train_steps: usize,
}

impl RssmConfig {
    pub fn desk() -> Self {
        RssmConfig {
            deter_dim: 128,
            z_vars: 8,
            z_classes: 8,
            embed_dim: 128,
            conv_channels: (16, 32),
            head_hidden: 128,
            beta: 0.3,
            delta: 0.8,
            zeta: 0.01,
            seq_len: 16,
            batch_size: 16,
            learning_rate: 3e-4,
            adam_eps: 1e-5,
            weight_decay: 5e-2,
            grad_clip: 100.0,
            train_steps: 1500,
        }
    }

    /// Hyperparameters at publication scale (works, but far exceeds the
    /// desk runtime budget).
    pub fn paper() -> Self {
        RssmConfig {
            deter_dim: 1024,
            z_vars: 32,
            z_classes: 32,
            embed_dim: 1024,
            conv_channels: (32, 64),
            head_hidden: 512,
            beta: 0.3,
            delta: 0.8,
            zeta: 0.01,
            seq_len: 50,
            batch_size: 50,
            learning_rate: 3e-4,
            adam_eps: 1e-5,
            weight_decay: 5e-2,
            grad_clip: 100.0,
            train_steps: 20_000,
        }
    }

    pub fn z_dim(&self) -> usize {
        self.z_vars * self.z_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.deter_dim + self.z_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.deter_dim == 0 || self.z_vars == 0 || self.z_classes == 0 {
            return Err(Error::config("rssm dims must be >= 1"));
        }
        if self.beta < 0.0 {
            return Err(Error::config("beta must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::config("delta must be in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(Error::config("zeta must be in [0,1]"));
        }
        if self.seq_len == 0 || self.batch_size == 0 {
            return Err(Error::config("seq_len and batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// One latent model state: deterministic `h` and one-hot categorical `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    /// `[H]`
    pub h: Tensor,
    /// `[D, C]`, each row exactly one-hot.
    pub z: Tensor,
}

impl ModelState {
    pub fn zero(cfg: &RssmConfig) -> Self {
        ModelState {
            h: Tensor::zeros(&[cfg.deter_dim]),
            z: Tensor::zeros(&[cfg.z_vars, cfg.z_classes]),
        }
    }

    /// Concatenation `[h, flatten(z)]`.
    pub fn feature(&self) -> Tensor {
        let mut data = self.h.data().to_vec();
        data.extend_from_slice(self.z.data());
        Tensor::from_vec(data)
    }
}

/// A batch of model states advanced in lockstep.
#[derive(Clone, Debug)]
pub struct StateBatch {
    /// `[B, H]`
    pub h: Tensor,
    /// `[B, D·C]`
    pub z: Tensor,
}

impl StateBatch {
    pub fn zero(cfg: &RssmConfig, batch: usize) -> Self {
        StateBatch {
            h: Tensor::zeros(&[batch, cfg.deter_dim]),
            z: Tensor::zeros(&[batch, cfg.z_dim()]),
        }
    }

    pub fn len(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[B, H + D·C]`
    pub fn features(&self) -> Tensor {
        let b = self.len();
        let hd = self.h.shape()[1];
        let zd = self.z.shape()[1];
        let mut data = Vec::with_capacity(b * (hd + zd));
        for r in 0..b {
            data.extend_from_slice(&self.h.data()[r * hd..(r + 1) * hd]);
            data.extend_from_slice(&self.z.data()[r * zd..(r + 1) * zd]);
        }
        Tensor::new(vec![b, hd + zd], data).unwrap()
    }

    pub fn state(&self, row: usize, cfg: &RssmConfig) -> ModelState {
        let hd = self.h.shape()[1];
        let zd = self.z.shape()[1];
        ModelState {
            h: Tensor::from_vec(self.h.data()[row * hd..(row + 1) * hd].to_vec()),
            z: Tensor::new(
                vec![cfg.z_vars, cfg.z_classes],
                self.z.data()[row * zd..(row + 1) * zd].to_vec(),
            )
            .unwrap(),
        }
    }

    pub fn from_states(states: &[ModelState]) -> Self {
        let h = Tensor::stack(&states.iter().map(|s| s.h.clone()).collect::<Vec<_>>()).unwrap();
        let b = states.len();
        let zd = states[0].z.len();
        let mut zdata = Vec::with_capacity(b * zd);
        for s in states {
            zdata.extend_from_slice(s.z.data());
        }
        StateBatch { h, z: Tensor::new(vec![b, zd], zdata).unwrap() }
    }

    pub fn is_finite(&self) -> bool {
        self.h.is_finite() && self.z.is_finite()
    }
}

pub struct WorldModel {
    pub cfg: RssmConfig,
    pub params: ParamSet,
    enc_static: (Conv2d, Conv2d),
    enc_grip: (Conv2d, Conv2d),
    fuse: Linear,
    core: GruCell,
    prior_head: Mlp,
    post_head: Mlp,
    dec_static_fc: Linear,
    dec_static: (ConvTranspose2d, ConvTranspose2d),
    dec_grip_fc: Linear,
    dec_grip: (ConvTranspose2d, ConvTranspose2d),
}

impl WorldModel {
    pub fn new(cfg: RssmConfig, seed: u64) -> Result<WorldModel> {
        cfg.validate()?;
        let mut rng = stream(seed, "wm/init");
        let mut ps = ParamSet::new();
        let (c1, c2) = cfg.conv_channels;

        let enc_static = (
            Conv2d::new(&mut ps, &mut rng, "enc_s0", 3, c1, 4, 2, 1),
            Conv2d::new(&mut ps, &mut rng, "enc_s1", c1, c2, 4, 2, 1),
        );
        let enc_grip = (
            Conv2d::new(&mut ps, &mut rng, "enc_g0", 3, c1, 4, 2, 1),
            Conv2d::new(&mut ps, &mut rng, "enc_g1", c1, c2, 4, 2, 1),
        );
        let s_sp = STATIC_RES / 4; // after two stride-2 convs
        let g_sp = GRIP_RES / 4;
        let enc_out = c2 * s_sp * s_sp + c2 * g_sp * g_sp;
        let fuse = Linear::new(
            &mut ps,
            &mut rng,
            "fuse",
            enc_out,
            cfg.embed_dim,
            (2.0 / enc_out as f64).sqrt(),
        );
        let core = GruCell::new(&mut ps, &mut rng, "core", cfg.z_dim() + ACTION_DIM, cfg.deter_dim);
        let prior_head = Mlp::new(
            &mut ps,
            &mut rng,
            "prior",
            &[cfg.deter_dim, cfg.head_hidden, cfg.z_dim()],
            Activation::Relu,
            Activation::Identity,
        );
        let post_head = Mlp::new(
            &mut ps,
            &mut rng,
            "post",
            &[cfg.deter_dim + cfg.embed_dim, cfg.head_hidden, cfg.z_dim()],
            Activation::Relu,
            Activation::Identity,
        );
        let feat = cfg.feature_dim();
        let dec_static_fc = Linear::new(
            &mut ps,
            &mut rng,
            "dec_s_fc",
            feat,
            c2 * s_sp * s_sp,
            (1.0 / feat as f64).sqrt(),
        );
        let dec_static = (
            ConvTranspose2d::new(&mut ps, &mut rng, "dec_s0", c2, c1, 4, 2, 1),
            ConvTranspose2d::new(&mut ps, &mut rng, "dec_s1", c1, 3, 4, 2, 1),
        );
        let dec_grip_fc = Linear::new(
            &mut ps,
            &mut rng,
            "dec_g_fc",
            feat,
            c2 * g_sp * g_sp,
            (1.0 / feat as f64).sqrt(),
        );
        let dec_grip = (
            ConvTranspose2d::new(&mut ps, &mut rng, "dec_g0", c2, c1, 4, 2, 1),
            ConvTranspose2d::new(&mut ps, &mut rng, "dec_g1", c1, 3, 4, 2, 1),
        );

        Ok(WorldModel {
            cfg,
            params: ps,
            enc_static,
            enc_grip,
            fuse,
            core,
            prior_head,
            post_head,
            dec_static_fc,
            dec_static,
            dec_grip_fc,
            dec_grip,
        })
    }

    // ── Graph builders ───────────────────────────────────────────────

    /// Fused embedding of a batch of observations: inputs `[B,16,16,3]`
    /// and `[B,8,8,3]`, output `[B, embed]`.
    pub fn encode_graph(&self, g: &mut Graph, statics: Var, grips: Var) -> Var {
        let b = g.shape(statics)[0];
        let (_, c2) = self.cfg.conv_channels;
        let s = self.enc_static.0.forward(g, &self.params, statics);
        let s = g.relu(s);
        let s = self.enc_static.1.forward(g, &self.params, s);
        let s = g.relu(s);
        let s_sp = STATIC_RES / 4;
        let s = g.reshape(s, &[b, s_sp * s_sp * c2]);

        let gr = self.enc_grip.0.forward(g, &self.params, grips);
        let gr = g.relu(gr);
        let gr = self.enc_grip.1.forward(g, &self.params, gr);
        let gr = g.relu(gr);
        let g_sp = GRIP_RES / 4;
        let gr = g.reshape(gr, &[b, g_sp * g_sp * c2]);

        let cat = g.concat_cols(&[s, gr]);
        let fused = self.fuse.forward(g, &self.params, cat);
        g.relu(fused)
    }

    /// h' = f(z, a, h) for batches.
    pub fn core_graph(&self, g: &mut Graph, z: Var, action: Var, h: Var) -> Var {
        let x = g.concat_cols(&[z, action]);
        self.core.forward(g, &self.params, x, h)
    }

    pub fn prior_logits_graph(&self, g: &mut Graph, h: Var) -> Var {
        self.prior_head.forward(g, &self.params, h)
    }

    pub fn post_logits_graph(&self, g: &mut Graph, h: Var, embed: Var) -> Var {
        let cat = g.concat_cols(&[h, embed]);
        self.post_head.forward(g, &self.params, cat)
    }

    /// Straight-through one-hot sample from `[B, D·C]` logits.
    pub fn sample_z_graph(&self, g: &mut Graph, logits: Var, rng: &mut impl Rng) -> Var {
        let b = g.shape(logits)[0];
        let rows = g.reshape(logits, &[b * self.cfg.z_vars, self.cfg.z_classes]);
        let one_hot = g.straight_through(rows, rng);
        g.reshape(one_hot, &[b, self.cfg.z_dim()])
    }

    /// Decode features `[B, F]` into per-view mean grids.
    pub fn decode_graph(&self, g: &mut Graph, feat: Var) -> (Var, Var) {
        let b = g.shape(feat)[0];
        let (_, c2) = self.cfg.conv_channels;
        let s_sp = STATIC_RES / 4;
        let g_sp = GRIP_RES / 4;

        let s = self.dec_static_fc.forward(g, &self.params, feat);
        let s = g.relu(s);
        let s = g.reshape(s, &[b, s_sp, s_sp, c2]);
        let s = self.dec_static.0.forward(g, &self.params, s);
        let s = g.relu(s);
        let s_mean = self.dec_static.1.forward(g, &self.params, s);

        let gr = self.dec_grip_fc.forward(g, &self.params, feat);
        let gr = g.relu(gr);
        let gr = g.reshape(gr, &[b, g_sp, g_sp, c2]);
        let gr = self.dec_grip.0.forward(g, &self.params, gr);
        let gr = g.relu(gr);
        let g_mean = self.dec_grip.1.forward(g, &self.params, gr);
        (s_mean, g_mean)
    }

    /// δ·KL(q ‖ sg(p)) + (1−δ)·KL(sg(q) ‖ p), summed over all rows. The
    /// scalar value equals the plain KL.
    pub fn kl_balanced_graph(&self, g: &mut Graph, post_logits: Var, prior_logits: Var, delta: f64) -> Var {
        let prior_sg = g.detach(prior_logits);
        let a1 = kl_from_logits(g, post_logits, prior_sg, self.cfg.z_classes);
        let post_sg = g.detach(post_logits);
        let a2 = kl_from_logits(g, post_sg, prior_logits, self.cfg.z_classes);
        let a1 = g.scale(a1, delta);
        let a2 = g.scale(a2, 1.0 - delta);
        g.add(a1, a2)
    }

    // ── Inference wrappers (constants only; graphs are dropped) ──────

    pub fn encode_batch(&self, obs: &[Observation]) -> Tensor {
        let statics = Tensor::stack(&obs.iter().map(|o| o.static_view.clone()).collect::<Vec<_>>()).unwrap();
        let grips = Tensor::stack(&obs.iter().map(|o| o.gripper_view.clone()).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let sv = g.constant(statics);
        let gv = g.constant(grips);
        let e = self.encode_graph(&mut g, sv, gv);
        g.value(e).clone()
    }

    /// Deterministic embedding of one observation.
    pub fn encode_obs(&self, obs: &Observation) -> Tensor {
        let e = self.encode_batch(std::slice::from_ref(obs));
        Tensor::from_vec(e.data().to_vec())
    }

    /// h' = f(ŝ, a) for a single state.
    pub fn recurrent_update(&self, prev: &ModelState, action: &[f64; ACTION_DIM]) -> Tensor {
        let batch = StateBatch::from_states(std::slice::from_ref(prev));
        let actions = Tensor::new(vec![1, ACTION_DIM], action.to_vec()).unwrap();
        let h = self.recurrent_update_batch(&batch, &actions);
        Tensor::from_vec(h.data().to_vec())
    }

    /// `[B,H]` update from a state batch and `[B,A]` actions.
    pub fn recurrent_update_batch(&self, states: &StateBatch, actions: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let z = g.constant(states.z.clone());
        let a = g.constant(actions.clone());
        let h = g.constant(states.h.clone());
        let out = self.core_graph(&mut g, z, a, h);
        g.value(out).clone()
    }

    /// Posterior sample and logits for a single state.
    pub fn posterior(&self, h: &Tensor, obs_embedding: &Tensor, rng: &mut impl Rng) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let hv = g.constant(h.reshape(&[1, self.cfg.deter_dim]).unwrap());
        let ev = g.constant(obs_embedding.reshape(&[1, self.cfg.embed_dim]).unwrap());
        let logits = self.post_logits_graph(&mut g, hv, ev);
        let z = self.sample_z_graph(&mut g, logits, rng);
        (
            g.value(z).reshape(&[self.cfg.z_vars, self.cfg.z_classes]).unwrap(),
            g.value(logits).reshape(&[self.cfg.z_vars, self.cfg.z_classes]).unwrap(),
        )
    }

    /// Prior sample and logits for a single state.
    pub fn prior(&self, h: &Tensor, rng: &mut impl Rng) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let hv = g.constant(h.reshape(&[1, self.cfg.deter_dim]).unwrap());
        let logits = self.prior_logits_graph(&mut g, hv);
        let z = self.sample_z_graph(&mut g, logits, rng);
        (
            g.value(z).reshape(&[self.cfg.z_vars, self.cfg.z_classes]).unwrap(),
            g.value(logits).reshape(&[self.cfg.z_vars, self.cfg.z_classes]).unwrap(),
        )
    }

    /// Per-view decoded mean grids for a single state.
    pub fn decode(&self, state: &ModelState) -> (Tensor, Tensor) {
        let feat = state.feature();
        let mut g = Graph::new();
        let f = g.constant(feat.reshape(&[1, self.cfg.feature_dim()]).unwrap());
        let (s, gr) = self.decode_graph(&mut g, f);
        (
            g.value(s).reshape(&[STATIC_RES, STATIC_RES, 3]).unwrap(),
            g.value(gr).reshape(&[GRIP_RES, GRIP_RES, 3]).unwrap(),
        )
    }

    /// Advance a state batch one step through the prior (imagination).
    pub fn prior_step_batch(&self, states: &StateBatch, actions: &Tensor, rng: &mut impl Rng) -> StateBatch {
        let mut g = Graph::new();
        let z = g.constant(states.z.clone());
        let a = g.constant(actions.clone());
        let h = g.constant(states.h.clone());
        let h_next = self.core_graph(&mut g, z, a, h);
        let logits = self.prior_logits_graph(&mut g, h_next);
        let z_next = self.sample_z_graph(&mut g, logits, rng);
        StateBatch { h: g.value(h_next).clone(), z: g.value(z_next).clone() }
    }

    /// Advance a state batch one step through the posterior, conditioning
    /// on fresh observations.
    pub fn posterior_step_batch(
        &self,
        states: &StateBatch,
        actions: &Tensor,
        obs: &[Observation],
        rng: &mut impl Rng,
    ) -> StateBatch {
        let statics =
            Tensor::stack(&obs.iter().map(|o| o.static_view.clone()).collect::<Vec<_>>()).unwrap();
        let grips =
            Tensor::stack(&obs.iter().map(|o| o.gripper_view.clone()).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let z = g.constant(states.z.clone());
        let a = g.constant(actions.clone());
        let h = g.constant(states.h.clone());
        let h_next = self.core_graph(&mut g, z, a, h);
        let sv = g.constant(statics);
        let gv = g.constant(grips);
        let embed = self.encode_graph(&mut g, sv, gv);
        let logits = self.post_logits_graph(&mut g, h_next, embed);
        let z_next = self.sample_z_graph(&mut g, logits, rng);
        StateBatch { h: g.value(h_next).clone(), z: g.value(z_next).clone() }
    }

    /// Open-loop latent rollout: `horizon` steps of recurrent update, prior
    /// sample, then policy action. Entry `i` is the state reached at step
    /// `i+1` together with the action that produced it.
    pub fn imagine(
        &self,
        init: &ModelState,
        mut policy: impl FnMut(&Tensor) -> [f64; ACTION_DIM],
        horizon: usize,
        rng: &mut impl Rng,
    ) -> Vec<(ModelState, [f64; ACTION_DIM])> {
        let mut out = Vec::with_capacity(horizon);
        let mut batch = StateBatch::from_states(std::slice::from_ref(init));
        let mut state = init.clone();
        for _ in 0..horizon {
            let action = policy(&state.feature());
            let actions = Tensor::new(vec![1, ACTION_DIM], action.to_vec()).unwrap();
            batch = self.prior_step_batch(&batch, &actions, rng);
            state = batch.state(0, &self.cfg);
            out.push((state.clone(), action));
        }
        out
    }

    /// Posterior featurization of whole episodes (recurrent context is
    /// carried along recorded actions). Episodes run in lockstep; features
    /// beyond an episode's length are dropped.
    pub fn featurize_episodes(&self, episodes: &[Episode], rng: &mut impl Rng) -> Vec<Vec<Tensor>> {
        let n = episodes.len();
        if n == 0 {
            return Vec::new();
        }
        let max_len = episodes.iter().map(|e| e.len()).max().unwrap();
        let mut features: Vec<Vec<Tensor>> = episodes.iter().map(|e| Vec::with_capacity(e.len())).collect();
        let mut batch = StateBatch::zero(&self.cfg, n);
        for t in 0..max_len {
            let obs: Vec<Observation> = episodes
                .iter()
                .map(|e| e.observation(t.min(e.len() - 1)))
                .collect();
            let mut acts = Vec::with_capacity(n * ACTION_DIM);
            for e in episodes {
                if t == 0 || t >= e.len() {
                    acts.extend_from_slice(&[0.0; ACTION_DIM]);
                } else {
                    acts.extend_from_slice(&e.actions[t - 1]);
                }
            }
            let actions = Tensor::new(vec![n, ACTION_DIM], acts).unwrap();
            batch = self.posterior_step_batch(&batch, &actions, &obs, rng);
            let feats = batch.features();
            let fd = self.cfg.feature_dim();
            for (i, e) in episodes.iter().enumerate() {
                if t < e.len() {
                    features[i].push(Tensor::from_vec(feats.data()[i * fd..(i + 1) * fd].to_vec()));
                }
            }
        }
        features
    }

    // ── Training ─────────────────────────────────────────────────────

    /// Build the negative-ELBO graph over one subsequence batch. Returns
    /// (loss, reconstruction value, KL value), the scalars averaged per
    /// sequence element.
    pub fn elbo_loss_graph(&self, g: &mut Graph, batch: &SubseqBatch, rng: &mut impl Rng) -> (Var, f64, f64) {
        let b = batch.batch_size;
        let l = batch.seq_len;
        let mut h = g.constant(Tensor::zeros(&[b, self.cfg.deter_dim]));
        let mut z = g.constant(Tensor::zeros(&[b, self.cfg.z_dim()]));
        let mut recon_terms: Vec<Var> = Vec::with_capacity(l);
        let mut kl_terms: Vec<Var> = Vec::with_capacity(l);
        for t in 0..l {
            let keep = g.constant(batch.keep_masks[t].clone());
            h = g.mul_rows(h, keep);
            z = g.mul_rows(z, keep);
            let a = g.constant(batch.actions[t].clone());
            let a = g.mul_rows(a, keep);
            h = self.core_graph(g, z, a, h);

            let sv = g.constant(batch.static_views[t].clone());
            let gv = g.constant(batch.grip_views[t].clone());
            let embed = self.encode_graph(g, sv, gv);
            let post_logits = self.post_logits_graph(g, h, embed);
            let prior_logits = self.prior_logits_graph(g, h);
            z = self.sample_z_graph(g, post_logits, rng);

            kl_terms.push(self.kl_balanced_graph(g, post_logits, prior_logits, self.cfg.delta));

            let feat = g.concat_cols(&[h, z]);
            let (s_mean, g_mean) = self.decode_graph(g, feat);
            let s_err = g.sub(s_mean, sv);
            let s_sq = g.mul(s_err, s_err);
            let s_sum = g.sum(s_sq);
            let g_err = g.sub(g_mean, gv);
            let g_sq = g.mul(g_err, g_err);
            let g_sum = g.sum(g_sq);
            let both = g.add(s_sum, g_sum);
            recon_terms.push(g.scale(both, 0.5));
        }
        let mut recon = recon_terms[0];
        for t in &recon_terms[1..] {
            recon = g.add(recon, *t);
        }
        let mut kl = kl_terms[0];
        for t in &kl_terms[1..] {
            kl = g.add(kl, *t);
        }
        let norm = 1.0 / (b * l) as f64;
        let recon = g.scale(recon, norm);
        let kl = g.scale(kl, norm);
        let recon_value = g.value(recon).item();
        let kl_value = g.value(kl).item();
        let beta_kl = g.scale(kl, self.cfg.beta);
        let loss = g.add(recon, beta_kl);
        (loss, recon_value, kl_value)
    }

    /// Train in place on play data. `on_step` receives
    /// (step, loss, recon, kl) after every optimizer step.
    pub fn train(
        &mut self,
        dataset: &Dataset,
        seed: u64,
        mut on_step: impl FnMut(usize, f64, f64, f64),
    ) -> Result<()> {
        let mut sample_rng = stream(seed, "wm/sample");
        let mut model_rng = stream(seed, "wm/train");
        let mut adam = Adam::new(
            &self.params,
            self.cfg.learning_rate,
            self.cfg.adam_eps,
            self.cfg.weight_decay,
            Some(self.cfg.grad_clip),
        );
        for step in 0..self.cfg.train_steps {
            let batch = sample_subsequences(
                dataset,
                self.cfg.seq_len,
                self.cfg.batch_size,
                self.cfg.zeta,
                &mut sample_rng,
            )?;
            let mut g = Graph::new();
            let (loss, recon, kl) = self.elbo_loss_graph(&mut g, &batch, &mut model_rng);
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::numeric(format!("world-model loss {loss_value} at step {step}")));
            }
            let mut grads = GradStore::new(&self.params);
            g.backward(loss, &mut grads)?;
            adam.step(&mut self.params, &grads)?;
            on_step(step, loss_value, recon, kl);
        }
        Ok(())
    }

    /// Open-loop fidelity: encode `context` frames through the posterior,
    /// then predict forward with the episode's recorded actions through the
    /// prior only, decoding each step. Returns per-step combined-view MSE.
    pub fn open_loop_mse(
        &self,
        episode: &Episode,
        context: usize,
        horizon: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        if episode.len() <= context {
            return Err(Error::contract("episode shorter than context"));
        }
        let mut batch = StateBatch::zero(&self.cfg, 1);
        for t in 0..context {
            let a = if t == 0 { [0.0; ACTION_DIM] } else { episode.actions[t - 1] };
            let actions = Tensor::new(vec![1, ACTION_DIM], a.to_vec()).unwrap();
            batch = self.posterior_step_batch(&batch, &actions, &[episode.observation(t)], rng);
        }
        let steps = horizon.min(episode.len() - context);
        let mut out = Vec::with_capacity(steps);
        for i in 0..steps {
            let t = context + i;
            let actions = Tensor::new(vec![1, ACTION_DIM], episode.actions[t - 1].to_vec()).unwrap();
            batch = self.prior_step_batch(&batch, &actions, rng);
            let state = batch.state(0, &self.cfg);
            let (s_mean, g_mean) = self.decode(&state);
            let truth = episode.observation(t);
            out.push(obs_mse(&s_mean, &g_mean, &truth));
        }
        Ok(out)
    }

    // ── Checkpointing ────────────────────────────────────────────────

    pub fn to_container(&self, seed: u64) -> Container {
        let config_json = serde_json::to_string(&self.cfg).expect("rssm config json");
        let mut c = Container::new("worldmodel", seed, &config_json);
        c.push_params("wm", &self.params);
        c
    }

    pub fn save(&self, path: &std::path::Path, seed: u64) -> Result<()> {
        self.to_container(seed).save(path)
    }

    pub fn from_container(c: &Container) -> Result<WorldModel> {
        c.expect_kind("worldmodel")?;
        let cfg: RssmConfig = serde_json::from_str(&c.config_json)?;
        let mut wm = WorldModel::new(cfg, c.seed)?;
        c.read_params("wm", &mut wm.params)?;
        Ok(wm)
    }

    pub fn load(path: &std::path::Path) -> Result<WorldModel> {
        WorldModel::from_container(&Container::load(path)?)
    }

    /// Hash of the config echo; policies and reward models record it so
    /// mismatched featurizers are refused at load time.
    pub fn config_hash(&self) -> u64 {
        crate::rng::fnv1a(serde_json::to_string(&self.cfg).unwrap().as_bytes())
    }
}

/// Mean squared error of decoded means against a rendered observation,
/// averaged over all pixels of both views.
pub fn obs_mse(static_mean: &Tensor, grip_mean: &Tensor, truth: &Observation) -> f64 {
    let mut sq = 0.0;
    for (a, b) in static_mean.data().iter().zip(truth.static_view.data()) {
        sq += (a - b) * (a - b);
    }
    for (a, b) in grip_mean.data().iter().zip(truth.gripper_view.data()) {
        sq += (a - b) * (a - b);
    }
    sq / (static_mean.len() + grip_mean.len()) as f64
}

/// One training batch of aligned subsequences.
pub struct SubseqBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Per step: `[B,16,16,3]`.
    pub static_views: Vec<Tensor>,
    /// Per step: `[B,8,8,3]`.
    pub grip_views: Vec<Tensor>,
    /// Per step: `[B,A]`, the action entering the step.
    pub actions: Vec<Tensor>,
    /// Per step: `[B]` with 0 where the recurrent state resets (always at
    /// t=0; with probability ζ afterwards).
    pub keep_masks: Vec<Tensor>,
}

/// Uniformly sample (episode, start) pairs and materialize the batch.
/// Episodes shorter than `seq_len` are skipped; if none qualify this is a
/// configuration error.
pub fn sample_subsequences(
    dataset: &Dataset,
    seq_len: usize,
    batch_size: usize,
    zeta: f64,
    rng: &mut impl Rng,
) -> Result<SubseqBatch> {
    let eligible: Vec<usize> = dataset
        .episodes
        .iter()
        .enumerate()
        .filter(|(_, e)| e.len() >= seq_len)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::config(format!(
            "no episode reaches the sequence length {seq_len}"
        )));
    }
    let mut picks = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let ep = eligible[rng.gen_range(0..eligible.len())];
        let max_start = dataset.episodes[ep].len() - seq_len;
        let start = rng.gen_range(0..=max_start);
        picks.push((ep, start));
    }
    let mut static_views = Vec::with_capacity(seq_len);
    let mut grip_views = Vec::with_capacity(seq_len);
    let mut actions = Vec::with_capacity(seq_len);
    let mut keep_masks = Vec::with_capacity(seq_len);
    for t in 0..seq_len {
        let mut statics = Vec::with_capacity(batch_size);
        let mut grips = Vec::with_capacity(batch_size);
        let mut acts = Vec::with_capacity(batch_size * ACTION_DIM);
        let mut keeps = Vec::with_capacity(batch_size);
        for &(ep, start) in &picks {
            let e = &dataset.episodes[ep];
            let idx = start + t;
            let o = e.observation(idx);
            statics.push(o.static_view);
            grips.push(o.gripper_view);
            if idx == 0 {
                acts.extend_from_slice(&[0.0; ACTION_DIM]);
            } else {
                acts.extend_from_slice(&e.actions[idx - 1]);
            }
            let reset = t == 0 || rng.gen_bool(zeta);
            keeps.push(if reset { 0.0 } else { 1.0 });
        }
        static_views.push(Tensor::stack(&statics).unwrap());
        grip_views.push(Tensor::stack(&grips).unwrap());
        actions.push(Tensor::new(vec![batch_size, ACTION_DIM], acts).unwrap());
        keep_masks.push(Tensor::from_vec(keeps));
    }
    Ok(SubseqBatch { batch_size, seq_len, static_views, grip_views, actions, keep_masks })
}

fn kl_from_logits(g: &mut Graph, q_logits: Var, p_logits: Var, classes: usize) -> Var {
    let numel: usize = g.shape(q_logits).iter().product();
    let rows = numel / classes;
    let qr = g.reshape(q_logits, &[rows, classes]);
    let pr = g.reshape(p_logits, &[rows, classes]);
    let q = g.softmax_rows(qr);
    let p = g.softmax_rows(pr);
    let lq = g.ln_floor(q, crate::prob::KL_LOG_FLOOR);
    let lp = g.ln_floor(p, crate::prob::KL_LOG_FLOOR);
    let diff = g.sub(lq, lp);
    let term = g.mul(q, diff);
    g.sum(term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{collect_play, EnvConfig, PlayConfig, Playbench};
    use crate::prob::categorical_kl;

    fn tiny_cfg() -> RssmConfig {
        RssmConfig {
            deter_dim: 24,
            z_vars: 4,
            z_classes: 5,
            embed_dim: 24,
            conv_channels: (4, 6),
            head_hidden: 24,
            seq_len: 6,
            batch_size: 4,
            train_steps: 10,
            ..RssmConfig::desk()
        }
    }

    fn one_obs() -> Observation {
        Playbench::new(EnvConfig::default()).observe()
    }

    #[test]
    fn encode_is_deterministic_with_expected_width() {
        let wm = WorldModel::new(tiny_cfg(), 0).unwrap();
        let obs = one_obs();
        let a = wm.encode_obs(&obs);
        let b = wm.encode_obs(&obs);
        assert_eq!(a.data(), b.data());
        assert_eq!(a.len(), wm.cfg.embed_dim);

        // Degenerate all-zero observation stays finite.
        let zero = Observation {
            static_view: Tensor::zeros(&[STATIC_RES, STATIC_RES, 3]),
            gripper_view: Tensor::zeros(&[GRIP_RES, GRIP_RES, 3]),
        };
        assert!(wm.encode_obs(&zero).is_finite());
    }

    #[test]
    fn desk_embedding_width_is_128() {
        let wm = WorldModel::new(RssmConfig::desk(), 0).unwrap();
        assert_eq!(wm.encode_obs(&one_obs()).len(), 128);
        assert_eq!(wm.cfg.deter_dim, 128);
    }

    #[test]
    fn posterior_and_prior_samples_are_one_hot_and_reproducible() {
        let wm = WorldModel::new(tiny_cfg(), 1).unwrap();
        let h = Tensor::zeros(&[wm.cfg.deter_dim]);
        let e = wm.encode_obs(&one_obs());

        let (z1, logits) = wm.posterior(&h, &e, &mut stream(7, "s"));
        let (z2, _) = wm.posterior(&h, &e, &mut stream(7, "s"));
        assert_eq!(z1.data(), z2.data(), "fixed rng seed must reproduce samples");
        assert_eq!(logits.shape(), &[wm.cfg.z_vars, wm.cfg.z_classes]);
        for r in 0..wm.cfg.z_vars {
            let row = &z1.data()[r * wm.cfg.z_classes..(r + 1) * wm.cfg.z_classes];
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert_eq!(row.iter().filter(|v| **v != 0.0).count(), 1);
        }

        let (zp, lp) = wm.prior(&h, &mut stream(8, "s"));
        assert_eq!(lp.shape(), &[wm.cfg.z_vars, wm.cfg.z_classes]);
        for r in 0..wm.cfg.z_vars {
            let row = &zp.data()[r * wm.cfg.z_classes..(r + 1) * wm.cfg.z_classes];
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn saturated_posterior_logits_give_deterministic_one_hot() {
        let wm = WorldModel::new(tiny_cfg(), 1).unwrap();
        let mut g = Graph::new();
        let mut data = vec![-20.0; wm.cfg.z_dim()];
        for r in 0..wm.cfg.z_vars {
            data[r * wm.cfg.z_classes + (r % wm.cfg.z_classes)] = 20.0;
        }
        let logits = g.constant(Tensor::new(vec![1, wm.cfg.z_dim()], data).unwrap());
        let z = wm.sample_z_graph(&mut g, logits, &mut stream(0, "x"));
        for r in 0..wm.cfg.z_vars {
            let row = &g.value(z).data()[r * wm.cfg.z_classes..(r + 1) * wm.cfg.z_classes];
            assert_eq!(row[r % wm.cfg.z_classes], 1.0);
        }
    }

    #[test]
    fn recurrent_update_deterministic_and_sized() {
        let wm = WorldModel::new(RssmConfig::desk(), 2).unwrap();
        let state = ModelState::zero(&wm.cfg);
        let a = [0.3, -0.2, 1.0];
        let h1 = wm.recurrent_update(&state, &a);
        let h2 = wm.recurrent_update(&state, &a);
        assert_eq!(h1.data(), h2.data());
        assert_eq!(h1.len(), 128);
    }

    #[test]
    fn kl_balanced_value_equals_plain_kl() {
        let wm = WorldModel::new(tiny_cfg(), 3).unwrap();
        let mut rng = stream(5, "klb");
        for _ in 0..10 {
            let q_logits = Tensor::randn(&[3, wm.cfg.z_dim()], 1.5, &mut rng);
            let p_logits = Tensor::randn(&[3, wm.cfg.z_dim()], 1.5, &mut rng);
            let mut g = Graph::new();
            let qv = g.input(q_logits.clone());
            let pv = g.input(p_logits.clone());
            let balanced = wm.kl_balanced_graph(&mut g, qv, pv, wm.cfg.delta);
            let value = g.value(balanced).item();

            // Oracle: plain categorical KL on softmax rows.
            let rows = 3 * wm.cfg.z_vars;
            let to_probs = |logits: &Tensor| {
                let mut data = Vec::new();
                for r in 0..rows {
                    let row = &logits.data()[r * wm.cfg.z_classes..(r + 1) * wm.cfg.z_classes];
                    data.extend(crate::prob::softmax(row));
                }
                Tensor::new(vec![rows, wm.cfg.z_classes], data).unwrap()
            };
            let plain = categorical_kl(&to_probs(&q_logits), &to_probs(&p_logits)).unwrap();
            assert!((value - plain).abs() < 1e-10, "{value} vs {plain}");
        }
    }

    #[test]
    fn kl_balancing_stop_gradients() {
        let wm = WorldModel::new(tiny_cfg(), 3).unwrap();
        let mut rng = stream(6, "klg");
        let q_logits = Tensor::randn(&[2, wm.cfg.z_dim()], 1.0, &mut rng);
        let p_logits = Tensor::randn(&[2, wm.cfg.z_dim()], 1.0, &mut rng);

        let grad_wrt = |delta: f64, wrt_prior: bool| -> Tensor {
            let mut g = Graph::new();
            let qv = g.input(q_logits.clone());
            let pv = g.input(p_logits.clone());
            let loss = wm.kl_balanced_graph(&mut g, qv, pv, delta);
            g.backward_input(loss, if wrt_prior { pv } else { qv }).unwrap()
        };

        // δ=1: gradient w.r.t. prior logits exactly zero.
        assert!(grad_wrt(1.0, true).data().iter().all(|v| *v == 0.0));
        // δ=0: gradient w.r.t. posterior logits exactly zero.
        assert!(grad_wrt(0.0, false).data().iter().all(|v| *v == 0.0));
        // δ=0.8: prior gradient is 0.2 × the full-KL prior gradient.
        let g_bal = grad_wrt(0.8, true);
        let mut g = Graph::new();
        let qv = g.input(q_logits.clone());
        let pv = g.input(p_logits.clone());
        let loss = kl_from_logits(&mut g, qv, pv, wm.cfg.z_classes);
        let g_plain = g.backward_input(loss, pv).unwrap();
        for (a, b) in g_bal.data().iter().zip(g_plain.data()) {
            assert!((a - 0.2 * b).abs() <= 1e-3 * b.abs().max(1e-9) + 1e-12, "{a} vs 0.2*{b}");
        }
    }

    #[test]
    fn imagine_structural_contracts() {
        let wm = WorldModel::new(tiny_cfg(), 4).unwrap();
        let init = ModelState::zero(&wm.cfg);
        let mut rng = stream(0, "imagine");
        assert!(wm.imagine(&init, |_| [0.0; 3], 0, &mut rng).is_empty());

        let traj = wm.imagine(&init, |_| [0.5, -0.5, 1.0], 100, &mut rng);
        assert_eq!(traj.len(), 100);
        for (state, _) in &traj {
            assert!(state.feature().is_finite());
            for r in 0..wm.cfg.z_vars {
                let row = &state.z.data()[r * wm.cfg.z_classes..(r + 1) * wm.cfg.z_classes];
                assert_eq!(row.iter().sum::<f64>(), 1.0);
                assert_eq!(row.iter().filter(|v| **v != 0.0).count(), 1);
            }
        }
    }

    #[test]
    fn decode_shapes_and_determinism() {
        let wm = WorldModel::new(tiny_cfg(), 5).unwrap();
        let mut state = ModelState::zero(&wm.cfg);
        // Give z valid one-hot rows.
        for r in 0..wm.cfg.z_vars {
            state.z.data_mut()[r * wm.cfg.z_classes] = 1.0;
        }
        let (s, gr) = wm.decode(&state);
        assert_eq!(s.shape(), &[STATIC_RES, STATIC_RES, 3]);
        assert_eq!(gr.shape(), &[GRIP_RES, GRIP_RES, 3]);
        let (s2, _) = wm.decode(&state);
        assert_eq!(s.data(), s2.data());
    }

    #[test]
    fn elbo_beta_zero_reduces_to_reconstruction() {
        let ds = collect_play(&EnvConfig::default(), &PlayConfig::default(), 400, 9).unwrap();
        let mut cfg = tiny_cfg();
        cfg.beta = 0.0;
        let wm = WorldModel::new(cfg, 6).unwrap();
        let batch =
            sample_subsequences(&ds, wm.cfg.seq_len, wm.cfg.batch_size, 0.0, &mut stream(1, "b"))
                .unwrap();
        let mut g = Graph::new();
        let (loss, recon, _kl) = wm.elbo_loss_graph(&mut g, &batch, &mut stream(2, "m"));
        assert!((g.value(loss).item() - recon).abs() < 1e-12);
    }

    #[test]
    fn elbo_finite_on_constant_observations() {
        // All-zero and all-one observations keep the loss finite.
        let wm = WorldModel::new(tiny_cfg(), 7).unwrap();
        for fill in [0.0, 1.0] {
            let b = wm.cfg.batch_size;
            let l = wm.cfg.seq_len;
            let batch = SubseqBatch {
                batch_size: b,
                seq_len: l,
                static_views: (0..l).map(|_| Tensor::full(&[b, STATIC_RES, STATIC_RES, 3], fill)).collect(),
                grip_views: (0..l).map(|_| Tensor::full(&[b, GRIP_RES, GRIP_RES, 3], fill)).collect(),
                actions: (0..l).map(|_| Tensor::zeros(&[b, ACTION_DIM])).collect(),
                keep_masks: (0..l)
                    .map(|t| Tensor::from_vec(vec![if t == 0 { 0.0 } else { 1.0 }; b]))
                    .collect(),
            };
            let mut g = Graph::new();
            let (loss, _, _) = wm.elbo_loss_graph(&mut g, &batch, &mut stream(3, "m"));
            assert!(g.value(loss).item().is_finite());
        }
    }

    #[test]
    fn subsequence_bounds_and_errors() {
        let ds = collect_play(&EnvConfig::default(), &PlayConfig::default(), 600, 10).unwrap();
        let mut rng = stream(4, "s");
        for _ in 0..20 {
            let batch = sample_subsequences(&ds, 50, 8, 1.0, &mut rng).unwrap();
            assert_eq!(batch.seq_len, 50);
            // With ζ=1 every position carries a reset.
            for mask in &batch.keep_masks {
                assert!(mask.data().iter().all(|v| *v == 0.0));
            }
        }
        assert!(matches!(
            sample_subsequences(&ds, 201, 8, 0.0, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn short_training_reduces_loss_and_posterior_prior_kl() {
        let ds = collect_play(&EnvConfig::default(), &PlayConfig::default(), 600, 12).unwrap();
        let mut cfg = tiny_cfg();
        cfg.train_steps = 60;
        cfg.learning_rate = 1e-3;
        let mut wm = WorldModel::new(cfg, 8).unwrap();
        let mut first = None;
        let mut last = 0.0;
        wm.train(&ds, 13, |_, loss, _, _| {
            if first.is_none() {
                first = Some(loss);
            }
            last = loss;
        })
        .unwrap();
        assert!(last < first.unwrap(), "loss {last} did not drop below {}", first.unwrap());
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let wm = WorldModel::new(tiny_cfg(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wm.ckpt");
        wm.save(&path, 9).unwrap();
        let back = WorldModel::load(&path).unwrap();
        assert_eq!(back.cfg, wm.cfg);
        let obs = one_obs();
        assert_eq!(wm.encode_obs(&obs).data(), back.encode_obs(&obs).data());
        assert_eq!(wm.config_hash(), back.config_hash());
    }

    #[test]
    fn gru_core_gradients_match_finite_differences() {
        let mut rng = stream(10, "fd");
        let mut ps = ParamSet::new();
        let gru = GruCell::new(&mut ps, &mut rng, "g", 7, 6);
        let z = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let h0 = Tensor::randn(&[3, 6], 1.0, &mut rng);
        crate::check::assert_grads_match(&mut ps, 1e-4, 1e-6, |g, ps| {
            let zv = g.constant(z.clone());
            let av = g.constant(a.clone());
            let x = g.concat_cols(&[zv, av]);
            let hv = g.constant(h0.clone());
            let h1 = gru.forward(g, ps, x, hv);
            let sq = g.mul(h1, h1);
            g.sum(sq)
        });
    }
}

