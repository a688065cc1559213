//! Real-environment evaluation protocol: fixed-horizon episodes from
//! jittered canonical starts, observations featurized through the frozen
//! world model's posterior with recurrent context, chunked action
//! execution, success counted if the predicate holds at any step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{success, EnvConfig, Observation, Playbench, Skill, ACTION_DIM};
use crate::error::Result;
use crate::policy::{sample_chains, DenoisePolicy};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::wm::{StateBatch, WorldModel};

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Binomial standard error over episodes.
    pub std_error: f64,
}

/// Run `episodes` seeded evaluation episodes in lockstep and report the
/// success rate.
pub fn evaluate_policy(
    env_cfg: &EnvConfig,
    wm: &WorldModel,
    policy: &impl DenoisePolicy,
    skill: Skill,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalOutcome> {
    let mut env_rngs: Vec<ChaCha8Rng> = (0..episodes)
        .map(|i| stream(seed, &format!("eval/env/{i}")))
        .collect();
    let mut policy_rng = stream(seed, "eval/policy");
    let mut envs: Vec<Playbench> = (0..episodes).map(|_| Playbench::new(*env_cfg)).collect();
    for (env, rng) in envs.iter_mut().zip(env_rngs.iter_mut()) {
        env.reset_jittered(rng);
    }
    let mut won = vec![false; episodes];

    // Initial posterior step from the first observation (zero context).
    let obs: Vec<Observation> = envs.iter().map(|e| e.observe()).collect();
    let zero_actions = Tensor::zeros(&[episodes, ACTION_DIM]);
    let mut states = StateBatch::zero(&wm.cfg, episodes);
    states = wm.posterior_step_batch(&states, &zero_actions, &obs, &mut policy_rng);

    let t_a = policy.t_a();
    let mut queued: Vec<Vec<[f64; ACTION_DIM]>> = vec![Vec::new(); episodes];
    let mut cursor = 0usize;
    for step in 0..horizon {
        if step % t_a == 0 {
            let chains = sample_chains(policy, &states.features(), &mut policy_rng);
            for (q, chain) in queued.iter_mut().zip(&chains) {
                *q = chain.actions(t_a);
            }
            cursor = 0;
        }
        let mut acts = Vec::with_capacity(episodes * ACTION_DIM);
        for q in &queued {
            acts.extend_from_slice(&q[cursor]);
        }
        cursor += 1;
        let mut obs = Vec::with_capacity(episodes);
        for (i, env) in envs.iter_mut().enumerate() {
            let a = [acts[i * ACTION_DIM], acts[i * ACTION_DIM + 1], acts[i * ACTION_DIM + 2]];
            obs.push(env.step(&a, &mut env_rngs[i]));
            if success(&env.state, skill) {
                won[i] = true;
            }
        }
        let actions = Tensor::new(vec![episodes, ACTION_DIM], acts)?;
        states = wm.posterior_step_batch(&states, &actions, &obs, &mut policy_rng);
    }
    let successes = won.iter().filter(|w| **w).count();
    let p = successes as f64 / episodes as f64;
    Ok(EvalOutcome {
        episodes,
        successes,
        success_rate: p,
        std_error: (p * (1.0 - p) / episodes as f64).sqrt(),
    })
}

/// Success rate averaged over several evaluation seeds, with the standard
/// error across seeds.
pub fn evaluate_over_seeds(
    env_cfg: &EnvConfig,
    wm: &WorldModel,
    policy: &impl DenoisePolicy,
    skill: Skill,
    episodes: usize,
    horizon: usize,
    seeds: &[u64],
) -> Result<(f64, f64, Vec<f64>)> {
    let mut rates = Vec::with_capacity(seeds.len());
    for &s in seeds {
        rates.push(evaluate_policy(env_cfg, wm, policy, skill, episodes, horizon, s)?.success_rate);
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let var = rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
        / rates.len().max(1) as f64;
    let se = (var / rates.len() as f64).sqrt();
    Ok((mean, se, rates))
}

/// Expert success rate under the same protocol (upper reference).
pub fn evaluate_expert(
    env_cfg: &EnvConfig,
    skill: Skill,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> EvalOutcome {
    let mut wins = 0;
    for i in 0..episodes {
        let mut rng = stream(seed, &format!("eval-expert/{i}"));
        let mut env = Playbench::new(*env_cfg);
        env.reset_jittered(&mut rng);
        for _ in 0..horizon {
            let a = crate::env::expert_action(
                &env.state,
                skill,
                env_cfg.step_size,
                0.8 * env_cfg.engage_radius,
            );
            env.step(&a, &mut rng);
            if success(&env.state, skill) {
                wins += 1;
                break;
            }
        }
    }
    let p = wins as f64 / episodes as f64;
    EvalOutcome {
        episodes,
        successes: wins,
        success_rate: p,
        std_error: (p * (1.0 - p) / episodes as f64).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{DiffusionPolicy, DiffusionPolicyConfig, ScheduleKind, SIGMA_MIN};
    use crate::wm::RssmConfig;

    #[test]
    fn random_policy_rarely_succeeds_and_is_reproducible() {
        let wm_cfg = RssmConfig {
            deter_dim: 16,
            z_vars: 3,
            z_classes: 4,
            embed_dim: 16,
            conv_channels: (3, 4),
            head_hidden: 16,
            ..RssmConfig::desk()
        };
        let wm = WorldModel::new(wm_cfg, 0).unwrap();
        let policy = DiffusionPolicy::new(
            DiffusionPolicyConfig {
                hidden: vec![16, 16],
                k_steps: 3,
                schedule: ScheduleKind::Cosine,
                sigma_min: SIGMA_MIN,
                t_p: 4,
                t_a: 4,
                kemb_dim: 4,
            },
            wm.cfg.feature_dim(),
            1,
        )
        .unwrap();
        let env_cfg = EnvConfig::default();
        let a = evaluate_policy(&env_cfg, &wm, &policy, Skill::OpenDrawer, 20, 60, 5).unwrap();
        let b = evaluate_policy(&env_cfg, &wm, &policy, Skill::OpenDrawer, 20, 60, 5).unwrap();
        assert_eq!(a.success_rate, b.success_rate);
        assert!(a.success_rate <= 0.15, "untrained policy at {}", a.success_rate);
    }

    #[test]
    fn expert_reference_is_high() {
        let out = evaluate_expert(&EnvConfig::default(), Skill::SlideRight, 50, 60, 3);
        assert!(out.success_rate >= 0.95, "expert at {}", out.success_rate);
    }
}
