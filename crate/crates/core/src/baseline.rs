//! Online model-free comparison: the same denoising-MDP PPO machinery run
//! against the real environment with ground-truth success rewards and the
//! frozen world-model posterior as featurizer, counting every physical
//! interaction consumed during training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dream::{estimate_advantages, ppo_update_phase, DreamConfig, RolloutBuffer, ValueFunction};
use crate::env::{success, EnvConfig, Observation, Playbench, Skill, ACTION_DIM};
use crate::error::{Error, Result};
use crate::eval::evaluate_policy;
use crate::opt::Adam;
use crate::policy::DenoisePolicy;
use crate::prob::diag_gaussian_log_prob;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::wm::{StateBatch, WorldModel};

/// Cumulative count of environment transitions consumed by training,
/// with periodic evaluation snapshots.
#[derive(Clone, Debug, Default)]
pub struct EnvStepCounter {
    steps: u64,
    /// (training env steps at snapshot, evaluation success rate).
    pub snapshots: Vec<(u64, f64)>,
}

impl EnvStepCounter {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn record(&mut self, rate: f64) {
        self.snapshots.push((self.steps, rate));
    }
}

/// The only step entry point for training environments: every transition
/// increments the shared counter.
pub struct CountedEnvPool {
    envs: Vec<Playbench>,
    counter: EnvStepCounter,
}

impl CountedEnvPool {
    pub fn new(cfg: EnvConfig, n: usize) -> Self {
        CountedEnvPool {
            envs: (0..n).map(|_| Playbench::new(cfg)).collect(),
            counter: EnvStepCounter::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn counter(&self) -> &EnvStepCounter {
        &self.counter
    }

    pub fn counter_mut(&mut self) -> &mut EnvStepCounter {
        &mut self.counter
    }

    pub fn reset_all(&mut self, rngs: &mut [ChaCha8Rng]) -> Vec<Observation> {
        self.envs
            .iter_mut()
            .zip(rngs)
            .map(|(e, r)| {
                e.reset_jittered(r);
                e.observe()
            })
            .collect()
    }

    /// Step every env once; increments the counter once per transition.
    pub fn step_all(
        &mut self,
        actions: &Tensor,
        rngs: &mut [ChaCha8Rng],
        skill: Skill,
    ) -> (Vec<Observation>, Vec<bool>) {
        let mut obs = Vec::with_capacity(self.envs.len());
        let mut succ = Vec::with_capacity(self.envs.len());
        for (i, env) in self.envs.iter_mut().enumerate() {
            let a = [
                actions.data()[i * ACTION_DIM],
                actions.data()[i * ACTION_DIM + 1],
                actions.data()[i * ACTION_DIM + 2],
            ];
            obs.push(env.step(&a, &mut rngs[i]));
            self.counter.steps += 1;
            succ.push(success(&env.state, skill));
        }
        (obs, succ)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// Parallel training environments.
    pub n_envs: usize,
    /// Evaluate every this many iterations.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_horizon: usize,
    /// Stop once this many training env steps have been consumed.
    pub max_env_steps: u64,
}

impl BaselineConfig {
    pub fn desk() -> Self {
        BaselineConfig {
            n_envs: 8,
            eval_every: 5,
            eval_episodes: 50,
            eval_horizon: 60,
            max_env_steps: 26_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OnlineRow {
    pub iteration: usize,
    pub env_steps: u64,
    pub mean_return: f64,
    pub ppo_loss: f64,
    pub value_loss: f64,
    pub bc_term: f64,
    pub approx_kl: f64,
}

pub struct OnlineOutcome {
    pub counter: EnvStepCounter,
    pub rows: Vec<OnlineRow>,
}

/// PPO against the real environment. Rewards are the per-frame
/// ground-truth success indicator averaged over each executed chunk; the
/// reward classifier is never consulted. Evaluation episodes run on
/// separate, uncounted environments — the counter tracks training
/// interactions only.
pub fn finetune_online<P: DenoisePolicy + Clone>(
    wm: &WorldModel,
    policy: &mut P,
    policy_pre: &P,
    skill: Skill,
    env_cfg: &EnvConfig,
    dream_cfg: &DreamConfig,
    cfg: &BaselineConfig,
    seed: u64,
    mut on_iter: impl FnMut(&OnlineRow),
) -> Result<OnlineOutcome> {
    dream_cfg.validate(policy.k_steps())?;
    if cfg.n_envs == 0 {
        return Err(Error::config("baseline needs at least one env"));
    }
    let n = cfg.n_envs;
    let t_len = dream_cfg.horizon;
    let k_steps = policy.k_steps();
    let d = policy.chunk_dim();
    let f_dim = wm.cfg.feature_dim();
    let t_a = policy.t_a();

    let mut pool = CountedEnvPool::new(*env_cfg, n);
    let mut critic = ValueFunction::new(f_dim, &dream_cfg.critic_hidden, seed);
    let mut actor_adam = Adam::new(policy.params(), dream_cfg.actor_lr, 1e-8, 0.0, None);
    let mut critic_adam = Adam::new(&critic.params, dream_cfg.critic_lr, 1e-8, 0.0, None);
    let mut policy_rng = stream(seed, "online/policy");
    let mut update_rng = stream(seed, "online/update");
    let mut rows = Vec::new();

    let mut iteration = 0usize;
    while pool.counter().steps() < cfg.max_env_steps {
        let mut env_rngs: Vec<ChaCha8Rng> = (0..n)
            .map(|i| stream(seed, &format!("online/env/{iteration}/{i}")))
            .collect();
        let policy_old = policy.clone();
        let mut buf = RolloutBuffer {
            n_episodes: n,
            horizon: t_len,
            k_steps,
            feat_dim: f_dim,
            chunk_dim: d,
            features: vec![0.0; n * (t_len + 1) * f_dim],
            chunk_in: vec![0.0; n * t_len * k_steps * d],
            action: vec![0.0; n * t_len * k_steps * d],
            old_logp: vec![0.0; n * t_len * k_steps],
            reward: vec![0.0; n * t_len],
            value: vec![0.0; n * (t_len + 1)],
            advantage: vec![0.0; n * t_len],
            ret: vec![0.0; n * t_len],
        };

        // Fresh episodes; posterior featurization with episode-initial h=0.
        let obs = pool.reset_all(&mut env_rngs);
        let zero_actions = Tensor::zeros(&[n, ACTION_DIM]);
        let mut states = StateBatch::zero(&wm.cfg, n);
        states = wm.posterior_step_batch(&states, &zero_actions, &obs, &mut policy_rng);

        for t in 0..t_len {
            let feats = states.features();
            for e in 0..n {
                let dst = (e * (t_len + 1) + t) * f_dim;
                buf.features[dst..dst + f_dim].copy_from_slice(feats.row(e));
            }
            // Denoise one chunk under the frozen iteration policy.
            let mut chunk = Tensor::randn(&[n, d], 1.0, &mut policy_rng);
            for k in (1..=k_steps).rev() {
                let ks = vec![k; n];
                let mu = policy_old.mean_batch(&feats, &chunk, &ks);
                let sigma = policy_old.sigma(k);
                let mut next = vec![0.0; n * d];
                for r in 0..n {
                    for j in 0..d {
                        let eps: f64 = policy_rng.sample(rand_distr::StandardNormal);
                        next[r * d + j] = mu.data()[r * d + j] + sigma[j] * eps;
                    }
                }
                for e in 0..n {
                    let idx = (e * t_len + t) * k_steps + (k_steps - k);
                    let c = idx * d;
                    buf.chunk_in[c..c + d].copy_from_slice(chunk.row(e));
                    buf.action[c..c + d].copy_from_slice(&next[e * d..(e + 1) * d]);
                    buf.old_logp[idx] =
                        diag_gaussian_log_prob(&next[e * d..(e + 1) * d], mu.row(e), &sigma)?;
                }
                chunk = Tensor::new(vec![n, d], next)?;
            }
            // Execute the chunk for t_a real frames.
            let mut exec = chunk.clone();
            for v in exec.data_mut() {
                *v = v.clamp(-1.0, 1.0);
            }
            let mut frame_success = vec![0.0; n];
            for frame in 0..t_a {
                let mut acts = Vec::with_capacity(n * ACTION_DIM);
                for e in 0..n {
                    let base = e * d + frame * ACTION_DIM;
                    acts.extend_from_slice(&exec.data()[base..base + ACTION_DIM]);
                }
                let actions = Tensor::new(vec![n, ACTION_DIM], acts)?;
                let (obs, succ) = pool.step_all(&actions, &mut env_rngs, skill);
                for (e, s) in succ.iter().enumerate() {
                    if *s {
                        frame_success[e] += 1.0;
                    }
                }
                states = wm.posterior_step_batch(&states, &actions, &obs, &mut policy_rng);
            }
            for e in 0..n {
                buf.reward[e * t_len + t] = frame_success[e] / t_a as f64;
            }
        }
        let final_feats = states.features();
        for e in 0..n {
            let dst = (e * (t_len + 1) + t_len) * f_dim;
            buf.features[dst..dst + f_dim].copy_from_slice(final_feats.row(e));
        }

        estimate_advantages(&mut buf, &critic, dream_cfg)?;
        let (ppo_loss, value_loss, bc_term, approx_kl) = ppo_update_phase(
            policy,
            policy_pre,
            &mut critic,
            &buf,
            dream_cfg,
            &mut actor_adam,
            &mut critic_adam,
            &mut update_rng,
        )?;

        let row = OnlineRow {
            iteration,
            env_steps: pool.counter().steps(),
            mean_return: buf.mean_return(),
            ppo_loss,
            value_loss,
            bc_term,
            approx_kl,
        };
        on_iter(&row);
        rows.push(row);

        if iteration % cfg.eval_every == 0 {
            let out = evaluate_policy(
                env_cfg,
                wm,
                policy,
                skill,
                cfg.eval_episodes,
                cfg.eval_horizon,
                stream_seed(seed, iteration),
            )?;
            pool.counter_mut().record(out.success_rate);
        }
        iteration += 1;
    }
    Ok(OnlineOutcome { counter: pool.counter().clone(), rows })
}

fn stream_seed(seed: u64, iteration: usize) -> u64 {
    crate::rng::fnv1a(format!("online-eval/{seed}/{iteration}").as_bytes())
}

/// First training-step count at which the evaluation snapshots reach
/// `target`, linearly interpolated between the bracketing snapshots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepsToMatch {
    Reached(f64),
    NotReached,
}

pub fn steps_to_match(snapshots: &[(u64, f64)], target: f64) -> Result<StepsToMatch> {
    if snapshots.is_empty() {
        return Err(Error::contract("steps_to_match needs at least one snapshot"));
    }
    if snapshots[0].1 >= target {
        return Ok(StepsToMatch::Reached(snapshots[0].0 as f64));
    }
    for w in snapshots.windows(2) {
        let (s0, r0) = w[0];
        let (s1, r1) = w[1];
        if r1 >= target {
            if r1 == r0 {
                return Ok(StepsToMatch::Reached(s1 as f64));
            }
            let frac = (target - r0) / (r1 - r0);
            return Ok(StepsToMatch::Reached(s0 as f64 + frac * (s1 - s0) as f64));
        }
    }
    Ok(StepsToMatch::NotReached)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_counts_every_transition() {
        let mut pool = CountedEnvPool::new(EnvConfig::default(), 3);
        let mut rngs: Vec<ChaCha8Rng> = (0..3).map(|i| stream(i, "c")).collect();
        pool.reset_all(&mut rngs);
        let actions = Tensor::zeros(&[3, ACTION_DIM]);
        for _ in 0..60 {
            pool.step_all(&actions, &mut rngs, Skill::OpenDrawer);
        }
        // N episodes of length 60 -> 60·N transitions.
        assert_eq!(pool.counter().steps(), 180);
    }

    #[test]
    fn steps_to_match_interpolation() {
        let snaps = vec![(1000u64, 0.4), (2000, 0.6)];
        // Target between snapshots: linear interpolation.
        assert_eq!(steps_to_match(&snaps, 0.5).unwrap(), StepsToMatch::Reached(1500.0));
        // Target below the first snapshot: its step count.
        assert_eq!(steps_to_match(&snaps, 0.3).unwrap(), StepsToMatch::Reached(1000.0));
        // Target never reached: sentinel.
        assert_eq!(steps_to_match(&snaps, 0.7).unwrap(), StepsToMatch::NotReached);
        assert!(steps_to_match(&[], 0.5).is_err());
    }
}
