//! Action policies conditioned on world-model features: a DDPM head that
//! denoises chunked actions through K Gaussian transitions with tractable
//! per-step log-likelihoods, and a unimodal Gaussian variant that
//! degenerates to a single transition (K = 1). Both implement
//! [`DenoisePolicy`], which is all the fine-tuning machinery sees.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{ACTION_DIM};
use crate::error::{Error, Result};
use crate::graph::{GradStore, Graph, Var};
use crate::io::Container;
use crate::nn::{Activation, Mlp, ParamId, ParamSet};
use crate::opt::{Adam, CosineSchedule, EmaTracker};
use crate::prob::diag_gaussian_log_prob;
use crate::rng::stream;
use crate::tensor::Tensor;

/// Lower clamp on the per-step sampling std, so late-step log-likelihoods
/// stay finite and bounded.
pub const SIGMA_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// DDPM noise schedule. Step indices run k = 1..=K; `alpha_bar(0)` is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct DdpmSchedule {
    pub k_steps: usize,
    pub kind: ScheduleKind,
    pub sigma_min: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

/// Build a schedule; `K >= 2` is required.
pub fn make_schedule(k_steps: usize, kind: ScheduleKind, sigma_min: f64) -> Result<DdpmSchedule> {
    if k_steps < 2 {
        return Err(Error::config(format!("schedule needs K >= 2, got {k_steps}")));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |k: f64| {
                let x = (k / k_steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            let f0 = f(0.0);
            (1..=k_steps)
                .map(|k| {
                    let abar_k = f(k as f64) / f0;
                    let abar_prev = f(k as f64 - 1.0) / f0;
                    (1.0 - abar_k / abar_prev).clamp(1e-8, 0.999)
                })
                .collect()
        }
        ScheduleKind::Linear => {
            let (lo, hi) = (1e-3, 0.35);
            (0..k_steps)
                .map(|i| lo + (hi - lo) * i as f64 / (k_steps - 1) as f64)
                .collect()
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(k_steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    // σ_k² = β̃_k, the standard posterior variance, clamped below.
    let sigmas: Vec<f64> = (1..=k_steps)
        .map(|k| {
            let abar_prev = if k == 1 { 1.0 } else { alpha_bars[k - 2] };
            let abar = alpha_bars[k - 1];
            let var = (1.0 - abar_prev) / (1.0 - abar) * betas[k - 1];
            var.sqrt().max(sigma_min)
        })
        .collect();
    Ok(DdpmSchedule { k_steps, kind, sigma_min, betas, alphas, alpha_bars, sigmas })
}

impl DdpmSchedule {
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }
    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }
    /// ᾱ_k with ᾱ_0 = 1.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }
    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[k - 1]
    }
    /// Posterior-mean coefficients: μ = c1·ā^k − c2·ε̂.
    pub fn mean_coefs(&self, k: usize) -> (f64, f64) {
        let c1 = 1.0 / self.alpha(k).sqrt();
        let c2 = self.beta(k) / ((1.0 - self.alpha_bar(k)).sqrt() * self.alpha(k).sqrt());
        (c1, c2)
    }
}

/// The policy interface the Dream-MDP machinery uses: K Gaussian denoising
/// transitions with a mean network and fixed per-step stds.
pub trait DenoisePolicy {
    fn k_steps(&self) -> usize;
    fn chunk_dim(&self) -> usize;
    fn feat_dim(&self) -> usize;
    fn t_p(&self) -> usize;
    fn t_a(&self) -> usize;
    /// Per-dimension sampling std at step k (k in 1..=K).
    fn sigma(&self, k: usize) -> Vec<f64>;
    /// μ_θ for each row; `feats` is `[R,F]`, `chunks` `[R,D]`, `ks[r]` the
    /// denoising step of row r. Binds trainable parameters into `g`.
    fn mean_graph(&self, g: &mut Graph, feats: &Tensor, chunks: &Tensor, ks: &[usize]) -> Var;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// The per-step embedding table, when the policy has one.
    fn step_embedding(&self) -> Option<ParamId> {
        None
    }

    fn mean_batch(&self, feats: &Tensor, chunks: &Tensor, ks: &[usize]) -> Tensor {
        let mut g = Graph::new();
        let v = self.mean_graph(&mut g, feats, chunks, ks);
        g.value(v).clone()
    }
}

// ── Diffusion policy ─────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionPolicyConfig {
    /// Denoiser hidden widths.
    pub hidden: Vec<usize>,
    /// Number of denoising steps K.
    pub k_steps: usize,
    pub schedule: ScheduleKind,
    pub sigma_min: f64,
    /// Planning horizon (chunk length) and executed prefix.
    pub t_p: usize,
    pub t_a: usize,
    /// Width of the learned step embedding.
    pub kemb_dim: usize,
}

impl DiffusionPolicyConfig {
    pub fn desk() -> Self {
        DiffusionPolicyConfig {
            hidden: vec![256, 256, 256],
            k_steps: 10,
            schedule: ScheduleKind::Cosine,
            sigma_min: SIGMA_MIN,
            t_p: 4,
            t_a: 4,
            kemb_dim: 16,
        }
    }

    pub fn paper() -> Self {
        DiffusionPolicyConfig { hidden: vec![512, 512, 512], k_steps: 20, ..Self::desk() }
    }

    pub fn chunk_dim(&self) -> usize {
        ACTION_DIM * self.t_p
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_a > self.t_p {
            return Err(Error::config("t_a must be <= t_p"));
        }
        if self.t_p == 0 || self.k_steps < 2 {
            return Err(Error::config("t_p >= 1 and k_steps >= 2 required"));
        }
        Ok(())
    }
}

/// DDPM action head: ε̂ = MLP([feature, noisy chunk, step embedding]).
#[derive(Clone, Debug)]
pub struct DiffusionPolicy {
    pub cfg: DiffusionPolicyConfig,
    pub feat_dim: usize,
    pub schedule: DdpmSchedule,
    pub params: ParamSet,
    mlp: Mlp,
    kemb: ParamId,
}

impl DiffusionPolicy {
    pub fn new(cfg: DiffusionPolicyConfig, feat_dim: usize, seed: u64) -> Result<DiffusionPolicy> {
        cfg.validate()?;
        let schedule = make_schedule(cfg.k_steps, cfg.schedule, cfg.sigma_min)?;
        let mut rng = stream(seed, "policy/init");
        let mut params = ParamSet::new();
        let mut dims = vec![feat_dim + cfg.chunk_dim() + cfg.kemb_dim];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(cfg.chunk_dim());
        let mlp = Mlp::new(&mut params, &mut rng, "denoiser", &dims, Activation::Relu, Activation::Identity);
        let kemb = params.add(
            "kemb",
            Tensor::randn(&[cfg.k_steps, cfg.kemb_dim], 0.5, &mut rng),
        );
        Ok(DiffusionPolicy { cfg, feat_dim, schedule, params, mlp, kemb })
    }

    /// Raw ε̂ network output (the BC regression target path).
    pub fn eps_graph(&self, g: &mut Graph, feats: &Tensor, chunks_var: Var, ks: &[usize]) -> Var {
        let rows = feats.shape()[0];
        assert_eq!(ks.len(), rows, "one k per row");
        let mut onehot = vec![0.0; rows * self.cfg.k_steps];
        for (r, &k) in ks.iter().enumerate() {
            assert!((1..=self.cfg.k_steps).contains(&k), "k {k} out of range");
            onehot[r * self.cfg.k_steps + (k - 1)] = 1.0;
        }
        let onehot = g.constant(Tensor::new(vec![rows, self.cfg.k_steps], onehot).unwrap());
        let table = g.param(&self.params, self.kemb);
        let kvecs = g.matmul(onehot, table);
        let fv = g.constant(feats.clone());
        let input = g.concat_cols(&[fv, chunks_var, kvecs]);
        self.mlp.forward(g, &self.params, input)
    }

    pub fn to_container(&self, seed: u64, wm_hash: u64) -> Container {
        let config_json = serde_json::to_string(&PolicyHeader {
            kind: "diffusion".into(),
            cfg: serde_json::to_value(&self.cfg).unwrap(),
            feat_dim: self.feat_dim,
            wm_hash,
        })
        .unwrap();
        let mut c = Container::new("policy:diffusion", seed, &config_json);
        c.push("schedule/betas", Tensor::from_vec(self.schedule.betas.clone()));
        c.push("schedule/sigmas", Tensor::from_vec(self.schedule.sigmas.clone()));
        c.push_params("policy", &self.params);
        c
    }

    pub fn from_container(c: &Container) -> Result<(DiffusionPolicy, u64)> {
        c.expect_kind("policy:diffusion")?;
        let header: PolicyHeader = serde_json::from_str(&c.config_json)?;
        let cfg: DiffusionPolicyConfig = serde_json::from_value(header.cfg.clone())?;
        let mut p = DiffusionPolicy::new(cfg, header.feat_dim, c.seed)?;
        c.read_params("policy", &mut p.params)?;
        let stored = c.get("schedule/betas")?;
        if stored.data() != p.schedule.betas.as_slice() {
            return Err(Error::checkpoint("stored schedule disagrees with config"));
        }
        Ok((p, header.wm_hash))
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyHeader {
    kind: String,
    cfg: serde_json::Value,
    feat_dim: usize,
    wm_hash: u64,
}

impl DenoisePolicy for DiffusionPolicy {
    fn k_steps(&self) -> usize {
        self.cfg.k_steps
    }
    fn chunk_dim(&self) -> usize {
        self.cfg.chunk_dim()
    }
    fn feat_dim(&self) -> usize {
        self.feat_dim
    }
    fn t_p(&self) -> usize {
        self.cfg.t_p
    }
    fn t_a(&self) -> usize {
        self.cfg.t_a
    }
    fn sigma(&self, k: usize) -> Vec<f64> {
        vec![self.schedule.sigma(k); self.chunk_dim()]
    }
    fn mean_graph(&self, g: &mut Graph, feats: &Tensor, chunks: &Tensor, ks: &[usize]) -> Var {
        let rows = feats.shape()[0];
        let chunks_var = g.constant(chunks.clone());
        let eps_hat = self.eps_graph(g, feats, chunks_var, ks);
        let mut c1 = Vec::with_capacity(rows);
        let mut c2 = Vec::with_capacity(rows);
        for &k in ks {
            let (a, b) = self.schedule.mean_coefs(k);
            c1.push(a);
            c2.push(b);
        }
        let c1 = g.constant(Tensor::from_vec(c1));
        let c2 = g.constant(Tensor::from_vec(c2));
        let lhs = g.mul_rows(chunks_var, c1);
        let rhs = g.mul_rows(eps_hat, c2);
        g.sub(lhs, rhs)
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn step_embedding(&self) -> Option<ParamId> {
        Some(self.kemb)
    }
}

// ── Unimodal Gaussian policy ─────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianPolicyConfig {
    pub hidden: Vec<usize>,
    pub t_p: usize,
    pub t_a: usize,
    pub init_logstd: f64,
}

impl GaussianPolicyConfig {
    pub fn desk() -> Self {
        GaussianPolicyConfig { hidden: vec![256, 256, 256], t_p: 4, t_a: 4, init_logstd: -1.0 }
    }

    pub fn chunk_dim(&self) -> usize {
        ACTION_DIM * self.t_p
    }
}

/// Mean MLP plus a state-independent diagonal log-std. Fits the denoise
/// interface with K = 1: the chain starts from N(0, I) and one Gaussian
/// step produces the action chunk.
#[derive(Clone, Debug)]
pub struct GaussianPolicy {
    pub cfg: GaussianPolicyConfig,
    pub feat_dim: usize,
    pub params: ParamSet,
    mlp: Mlp,
    logstd: ParamId,
}

impl GaussianPolicy {
    pub fn new(cfg: GaussianPolicyConfig, feat_dim: usize, seed: u64) -> Result<GaussianPolicy> {
        if cfg.t_a > cfg.t_p || cfg.t_p == 0 {
            return Err(Error::config("t_a <= t_p and t_p >= 1 required"));
        }
        let mut rng = stream(seed, "gauss/init");
        let mut params = ParamSet::new();
        let mut dims = vec![feat_dim];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(cfg.chunk_dim());
        let mlp = Mlp::new(&mut params, &mut rng, "mean", &dims, Activation::Relu, Activation::Identity);
        let logstd = params.add("logstd", Tensor::full(&[cfg.chunk_dim()], cfg.init_logstd));
        Ok(GaussianPolicy { cfg, feat_dim, params, mlp, logstd })
    }

    pub fn logstd_values(&self) -> &[f64] {
        self.params.get(self.logstd).data()
    }

    pub fn to_container(&self, seed: u64, wm_hash: u64) -> Container {
        let config_json = serde_json::to_string(&PolicyHeader {
            kind: "gaussian".into(),
            cfg: serde_json::to_value(&self.cfg).unwrap(),
            feat_dim: self.feat_dim,
            wm_hash,
        })
        .unwrap();
        let mut c = Container::new("policy:gaussian", seed, &config_json);
        c.push_params("policy", &self.params);
        c
    }

    pub fn from_container(c: &Container) -> Result<(GaussianPolicy, u64)> {
        c.expect_kind("policy:gaussian")?;
        let header: PolicyHeader = serde_json::from_str(&c.config_json)?;
        let cfg: GaussianPolicyConfig = serde_json::from_value(header.cfg.clone())?;
        let mut p = GaussianPolicy::new(cfg, header.feat_dim, c.seed)?;
        c.read_params("policy", &mut p.params)?;
        Ok((p, header.wm_hash))
    }
}

impl DenoisePolicy for GaussianPolicy {
    fn k_steps(&self) -> usize {
        1
    }
    fn chunk_dim(&self) -> usize {
        self.cfg.chunk_dim()
    }
    fn feat_dim(&self) -> usize {
        self.feat_dim
    }
    fn t_p(&self) -> usize {
        self.cfg.t_p
    }
    fn t_a(&self) -> usize {
        self.cfg.t_a
    }
    fn sigma(&self, _k: usize) -> Vec<f64> {
        self.logstd_values().iter().map(|v| v.exp().max(SIGMA_MIN)).collect()
    }
    fn mean_graph(&self, g: &mut Graph, feats: &Tensor, _chunks: &Tensor, _ks: &[usize]) -> Var {
        let fv = g.constant(feats.clone());
        self.mlp.forward(g, &self.params, fv)
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Either policy kind, as stored in checkpoints.
pub enum AnyPolicy {
    Diffusion(DiffusionPolicy),
    Gaussian(GaussianPolicy),
}

impl AnyPolicy {
    pub fn load(path: &std::path::Path) -> Result<(AnyPolicy, u64)> {
        let c = Container::load(path)?;
        match c.kind.as_str() {
            "policy:diffusion" => {
                let (p, h) = DiffusionPolicy::from_container(&c)?;
                Ok((AnyPolicy::Diffusion(p), h))
            }
            "policy:gaussian" => {
                let (p, h) = GaussianPolicy::from_container(&c)?;
                Ok((AnyPolicy::Gaussian(p), h))
            }
            other => Err(Error::checkpoint(format!("'{other}' is not a policy checkpoint"))),
        }
    }
}

// ── Chain sampling ───────────────────────────────────────────────────

/// One recorded denoising transition.
#[derive(Clone, Debug)]
pub struct ChainStep {
    pub k: usize,
    pub input: Vec<f64>,
    pub mean: Vec<f64>,
    /// Unclamped sample ā^{k−1}.
    pub output: Vec<f64>,
    pub log_prob: f64,
}

/// A full denoising trajectory ā^K … ā^0 for one feature vector.
#[derive(Clone, Debug)]
pub struct DiffusionChain {
    pub steps: Vec<ChainStep>,
}

impl DiffusionChain {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Final ā^0 before clamping.
    pub fn final_unclamped(&self) -> &[f64] {
        &self.steps.last().expect("non-empty chain").output
    }

    /// Executed action chunk: ā^0 clamped to [−1,1].
    pub fn action_chunk(&self) -> Vec<f64> {
        self.final_unclamped().iter().map(|v| v.clamp(-1.0, 1.0)).collect()
    }

    /// First `t_a` actions of the executed chunk.
    pub fn actions(&self, t_a: usize) -> Vec<[f64; ACTION_DIM]> {
        let chunk = self.action_chunk();
        (0..t_a)
            .map(|i| {
                let mut a = [0.0; ACTION_DIM];
                a.copy_from_slice(&chunk[i * ACTION_DIM..(i + 1) * ACTION_DIM]);
                a
            })
            .collect()
    }
}

/// Sample full chains for a batch of feature rows.
pub fn sample_chains(policy: &impl DenoisePolicy, feats: &Tensor, rng: &mut impl Rng) -> Vec<DiffusionChain> {
    let rows = feats.shape()[0];
    let d = policy.chunk_dim();
    let k_steps = policy.k_steps();
    let mut chains: Vec<DiffusionChain> =
        (0..rows).map(|_| DiffusionChain { steps: Vec::with_capacity(k_steps) }).collect();
    let mut chunk = Tensor::randn(&[rows, d], 1.0, rng);
    for k in (1..=k_steps).rev() {
        let ks = vec![k; rows];
        let mu = policy.mean_batch(feats, &chunk, &ks);
        let sigma = policy.sigma(k);
        let mut next = vec![0.0; rows * d];
        for r in 0..rows {
            for j in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                next[r * d + j] = mu.data()[r * d + j] + sigma[j] * eps;
            }
        }
        for (r, chain) in chains.iter_mut().enumerate() {
            let out = next[r * d..(r + 1) * d].to_vec();
            let mean = mu.row(r).to_vec();
            let log_prob = diag_gaussian_log_prob(&out, &mean, &sigma).expect("positive sigma");
            chain.steps.push(ChainStep {
                k,
                input: chunk.row(r).to_vec(),
                mean,
                output: out,
                log_prob,
            });
        }
        chunk = Tensor::new(vec![rows, d], next).unwrap();
    }
    chains
}

/// Sample one chain for a single feature vector.
pub fn sample_chain(policy: &impl DenoisePolicy, feature: &Tensor, rng: &mut impl Rng) -> DiffusionChain {
    let feats = feature.reshape(&[1, feature.len()]).unwrap();
    sample_chains(policy, &feats, rng).pop().unwrap()
}

/// One denoising transition: ā^{k−1} ~ N(μ_θ, σ_k²I) with its log-density.
/// At k=1 the returned sample is clamped to [−1,1] for execution while the
/// log-probability is evaluated on the unclamped draw.
pub fn denoise_step(
    policy: &impl DenoisePolicy,
    feature: &Tensor,
    chunk: &[f64],
    k: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, f64)> {
    if !(1..=policy.k_steps()).contains(&k) {
        return Err(Error::contract(format!(
            "denoise step k={k} outside [1, {}]",
            policy.k_steps()
        )));
    }
    let d = policy.chunk_dim();
    if chunk.len() != d {
        return Err(Error::contract(format!("chunk length {} != {d}", chunk.len())));
    }
    let feats = feature.reshape(&[1, feature.len()]).unwrap();
    let chunk_t = Tensor::new(vec![1, d], chunk.to_vec()).unwrap();
    let mu = policy.mean_batch(&feats, &chunk_t, &[k]);
    let sigma = policy.sigma(k);
    let mut out = vec![0.0; d];
    for j in 0..d {
        let eps: f64 = rng.sample(StandardNormal);
        out[j] = mu.data()[j] + sigma[j] * eps;
    }
    let log_prob = diag_gaussian_log_prob(&out, mu.data(), &sigma)?;
    if k == 1 {
        for v in out.iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
    }
    Ok((out, log_prob))
}

/// Dispenses actions from sampled chunks: a fresh chain every `t_a` calls.
pub struct ChunkExecutor {
    queue: Vec<[f64; ACTION_DIM]>,
    cursor: usize,
    pub chains_sampled: usize,
}

impl ChunkExecutor {
    pub fn new() -> Self {
        ChunkExecutor { queue: Vec::new(), cursor: 0, chains_sampled: 0 }
    }

    /// Discard buffered actions (call at episode boundaries).
    pub fn reset(&mut self) {
        self.queue.clear();
        self.cursor = 0;
    }

    pub fn next_action(
        &mut self,
        policy: &impl DenoisePolicy,
        feature: &Tensor,
        rng: &mut impl Rng,
    ) -> [f64; ACTION_DIM] {
        if self.cursor >= self.queue.len() {
            let chain = sample_chain(policy, feature, rng);
            self.queue = chain.actions(policy.t_a());
            self.cursor = 0;
            self.chains_sampled += 1;
        }
        let a = self.queue[self.cursor];
        self.cursor += 1;
        a
    }
}

impl Default for ChunkExecutor {
    fn default() -> Self {
        Self::new()
    }
}

// ── Behavior-cloning pre-training ────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BcConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub ema_start_epoch: u64,
    pub ema_every: u64,
}

impl BcConfig {
    pub fn desk() -> Self {
        BcConfig {
            epochs: 160,
            batch: 128,
            lr_initial: 1e-4,
            lr_final: 1e-5,
            weight_decay: 1e-6,
            ema_decay: 0.99,
            ema_start_epoch: 20,
            ema_every: 1,
        }
    }

    pub fn paper() -> Self {
        BcConfig {
            epochs: 5000,
            batch: 256,
            lr_initial: 1e-4,
            lr_final: 1e-5,
            weight_decay: 1e-6,
            ema_decay: 0.995,
            ema_start_epoch: 20,
            ema_every: 10,
        }
    }
}

/// Latent behavior-cloning pairs: world-model features and expert action
/// chunks (T_p actions flattened, padded with the final action).
#[derive(Clone, Debug)]
pub struct LatentPairs {
    pub features: Tensor,
    pub chunks: Tensor,
}

impl LatentPairs {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Assemble pairs from per-episode features and recorded actions.
    pub fn build(features: &[Vec<Tensor>], episodes: &[crate::data::Episode], t_p: usize) -> LatentPairs {
        let feat_dim = features[0][0].len();
        let chunk_dim = ACTION_DIM * t_p;
        let mut fdata = Vec::new();
        let mut cdata = Vec::new();
        let mut rows = 0;
        for (feats, ep) in features.iter().zip(episodes) {
            for t in 0..ep.len() {
                fdata.extend_from_slice(feats[t].data());
                for i in 0..t_p {
                    let idx = (t + i).min(ep.len() - 1);
                    cdata.extend_from_slice(&ep.actions[idx]);
                }
                rows += 1;
            }
        }
        LatentPairs {
            features: Tensor::new(vec![rows, feat_dim], fdata).unwrap(),
            chunks: Tensor::new(vec![rows, chunk_dim], cdata).unwrap(),
        }
    }
}

/// DDPM surrogate loss on one minibatch: sample k and ε, noise the expert
/// chunk to ā^k, regress ε̂ against ε.
pub fn diffusion_bc_loss_graph(
    policy: &DiffusionPolicy,
    g: &mut Graph,
    feats: &Tensor,
    chunks: &Tensor,
    rng: &mut impl Rng,
) -> Var {
    let rows = feats.shape()[0];
    let d = policy.chunk_dim();
    let ks: Vec<usize> = (0..rows).map(|_| rng.gen_range(1..=policy.cfg.k_steps)).collect();
    let eps = Tensor::randn(&[rows, d], 1.0, rng);
    let mut c_signal = Vec::with_capacity(rows);
    let mut c_noise = Vec::with_capacity(rows);
    for &k in &ks {
        let abar = policy.schedule.alpha_bar(k);
        c_signal.push(abar.sqrt());
        c_noise.push((1.0 - abar).sqrt());
    }
    let chunks_v = g.constant(chunks.clone());
    let eps_v = g.constant(eps);
    let cs = g.constant(Tensor::from_vec(c_signal));
    let cn = g.constant(Tensor::from_vec(c_noise));
    let signal = g.mul_rows(chunks_v, cs);
    let noise = g.mul_rows(eps_v, cn);
    let noisy = g.add(signal, noise);
    let eps_hat = policy.eps_graph(g, feats, noisy, &ks);
    let diff = g.sub(eps_hat, eps_v);
    let sq = g.mul(diff, diff);
    g.mean(sq)
}

/// Pre-train the diffusion policy by behavior cloning; on return the
/// policy holds the EMA weights. Returns mean loss per epoch.
pub fn pretrain_diffusion(
    policy: &mut DiffusionPolicy,
    data: &LatentPairs,
    cfg: &BcConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut order_rng = stream(seed, "bc/order");
    let mut noise_rng = stream(seed, "bc/noise");
    let mut adam = Adam::new(&policy.params, cfg.lr_initial, 1e-8, cfg.weight_decay, None);
    let mut ema = EmaTracker::new(&policy.params, cfg.ema_decay, cfg.ema_start_epoch, cfg.ema_every);
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch).max(1);
    let lr_schedule = CosineSchedule::new(
        cfg.lr_initial,
        cfg.lr_final,
        (cfg.epochs * steps_per_epoch) as u64,
    );
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, order_rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        for mb in order.chunks(cfg.batch) {
            let feats = data.features.take_rows(mb)?;
            let chunks = data.chunks.take_rows(mb)?;
            let mut g = Graph::new();
            let loss = diffusion_bc_loss_graph(policy, &mut g, &feats, &chunks, &mut noise_rng);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::numeric(format!("bc loss {value} at epoch {epoch}")));
            }
            epoch_loss += value * mb.len() as f64;
            let mut grads = GradStore::new(&policy.params);
            g.backward(loss, &mut grads)?;
            adam.set_lr(lr_schedule.value(step));
            adam.step(&mut policy.params, &grads)?;
            step += 1;
        }
        ema.maybe_update(epoch as u64, &policy.params);
        losses.push(epoch_loss / n as f64);
    }
    ema.write_to(&mut policy.params);
    Ok(losses)
}

/// Maximum-likelihood pre-training of the Gaussian policy on the same
/// latent pairs. Returns mean negative log-likelihood per epoch.
pub fn pretrain_gaussian(
    policy: &mut GaussianPolicy,
    data: &LatentPairs,
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut order_rng = stream(seed, "gbc/order");
    let mut adam = Adam::new(&policy.params, lr, 1e-8, 0.0, None);
    let n = data.len();
    let d = policy.chunk_dim();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, order_rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        for mb in order.chunks(batch) {
            let feats = data.features.take_rows(mb)?;
            let chunks = data.chunks.take_rows(mb)?;
            let rows = mb.len();
            let mut g = Graph::new();
            let mu = policy.mean_graph(&mut g, &feats, &chunks, &vec![1; rows]);
            let target = g.constant(chunks.clone());
            let diff = g.sub(target, mu);
            // Broadcast exp(−logstd) across rows via an outer product.
            let logstd = g.param(&policy.params, policy.logstd);
            let neg = g.scale(logstd, -1.0);
            let inv_sigma = g.exp(neg);
            let inv_row = g.reshape(inv_sigma, &[1, d]);
            let ones = g.constant(Tensor::full(&[rows, 1], 1.0));
            let inv_mat = g.matmul(ones, inv_row);
            let z = g.mul(diff, inv_mat);
            let sq = g.mul(z, z);
            let sq_sum = g.sum(sq);
            let half = g.scale(sq_sum, 0.5 / rows as f64);
            let ls_sum = g.sum(logstd);
            let loss = g.add(half, ls_sum);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::numeric(format!("gaussian bc loss {value} at epoch {epoch}")));
            }
            epoch_loss += value * rows as f64;
            let mut grads = GradStore::new(&policy.params);
            g.backward(loss, &mut grads)?;
            adam.step(&mut policy.params, &grads)?;
        }
        losses.push(epoch_loss / n as f64);
    }
    Ok(losses)
}
