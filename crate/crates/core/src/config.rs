//! Run configuration: a single tree covering every pipeline stage, with
//! layered presets ("paper" publication-scale values and the "desk"
//! defaults sized for a commodity CPU). A TOML file overrides preset
//! fields; unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineConfig;
use crate::dream::DreamConfig;
use crate::env::{DemoConfig, EnvConfig, PlayConfig};
use crate::error::{Error, Result};
use crate::policy::{BcConfig, DiffusionPolicyConfig, GaussianPolicyConfig};
use crate::reward::RewardConfig;
use crate::wm::RssmConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Preset> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::config(format!("unknown preset '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectConfig {
    pub play_transitions: usize,
    pub demos_per_skill: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianBcConfig {
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub horizon: usize,
}

/// Everything a full run needs, stage by stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub play: PlayConfig,
    pub demo: DemoConfig,
    pub collect: CollectConfig,
    pub wm: RssmConfig,
    pub policy: DiffusionPolicyConfig,
    pub bc: BcConfig,
    pub gaussian: GaussianPolicyConfig,
    pub gaussian_bc: GaussianBcConfig,
    pub reward: RewardConfig,
    pub finetune: DreamConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> TrainConfig {
        match preset {
            Preset::Desk => TrainConfig {
                seed: 0,
                env: EnvConfig::default(),
                play: PlayConfig::default(),
                demo: DemoConfig::default(),
                collect: CollectConfig { play_transitions: 50_000, demos_per_skill: 50 },
                wm: RssmConfig::desk(),
                policy: DiffusionPolicyConfig::desk(),
                bc: BcConfig::desk(),
                gaussian: GaussianPolicyConfig::desk(),
                gaussian_bc: GaussianBcConfig { epochs: 120, batch: 128, learning_rate: 3e-4 },
                reward: RewardConfig::desk(),
                finetune: DreamConfig::desk(),
                baseline: BaselineConfig::desk(),
                eval: EvalConfig { episodes: 50, horizon: 60 },
            },
            Preset::Paper => TrainConfig {
                collect: CollectConfig { play_transitions: 500_000, demos_per_skill: 50 },
                wm: RssmConfig::paper(),
                policy: DiffusionPolicyConfig::paper(),
                bc: BcConfig::paper(),
                reward: RewardConfig::paper(),
                finetune: DreamConfig::paper(),
                ..TrainConfig::preset(Preset::Desk)
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.wm.validate()?;
        self.policy.validate()?;
        self.finetune.validate(self.policy.k_steps)?;
        if self.collect.play_transitions == 0 {
            return Err(Error::config("play_transitions must be >= 1"));
        }
        if self.collect.demos_per_skill == 0 {
            return Err(Error::config("demos_per_skill must be >= 1"));
        }
        if self.eval.episodes == 0 || self.eval.horizon == 0 {
            return Err(Error::config("eval episodes and horizon must be >= 1"));
        }
        if self.play.episode_len < self.wm.seq_len {
            return Err(Error::config(format!(
                "play episode length {} shorter than wm sequence length {}",
                self.play.episode_len, self.wm.seq_len
            )));
        }
        if !(0.0..=1.0).contains(&self.reward.negatives_frac) {
            return Err(Error::config("negatives_frac must be in [0,1]"));
        }
        Ok(())
    }

    /// Apply a TOML override file on top of this config. Every key must
    /// exist in the serialized base tree.
    pub fn apply_toml(&self, text: &str) -> Result<TrainConfig> {
        let base = toml::Value::try_from(self).map_err(|e| Error::Serde(e.to_string()))?;
        let over: toml::Value =
            text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        let merged = merge_toml(base, &over, "")?;
        let cfg: TrainConfig = merged.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    /// Apply `section.field=value` style overrides (CLI flags beat file
    /// values).
    pub fn apply_overrides(&self, pairs: &[String]) -> Result<TrainConfig> {
        let mut cfg = self.clone();
        for pair in pairs {
            let (path, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override '{pair}' is not key=value")))?;
            let toml_text = path_to_toml(path.trim(), value.trim())?;
            cfg = cfg.apply_toml(&toml_text)?;
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config is serializable")
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is serializable")
    }
}

fn path_to_toml(path: &str, value: &str) -> Result<String> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override path '{path}'")));
    }
    let key = parts.last().unwrap();
    // Quote values that do not parse as TOML scalars (bare strings).
    let literal = if value.parse::<f64>().is_ok()
        || value.parse::<bool>().is_ok()
        || value.starts_with('[')
        || value.starts_with('"')
    {
        value.to_string()
    } else {
        format!("\"{value}\"")
    };
    if parts.len() == 1 {
        Ok(format!("{key} = {literal}\n"))
    } else {
        Ok(format!("[{}]\n{key} = {literal}\n", parts[..parts.len() - 1].join(".")))
    }
}

fn merge_toml(base: toml::Value, over: &toml::Value, path: &str) -> Result<toml::Value> {
    match (base, over) {
        (toml::Value::Table(mut base_map), toml::Value::Table(over_map)) => {
            for (k, v) in over_map {
                let child_path = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match base_map.remove(k) {
                    Some(b) => {
                        base_map.insert(k.clone(), merge_toml(b, v, &child_path)?);
                    }
                    None => {
                        return Err(Error::config(format!("unknown config key '{child_path}'")));
                    }
                }
            }
            Ok(toml::Value::Table(base_map))
        }
        (_, v) => Ok(v.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        TrainConfig::preset(Preset::Desk).validate().unwrap();
        TrainConfig::preset(Preset::Paper).validate().unwrap();
    }

    #[test]
    fn paper_preset_carries_table_values() {
        let cfg = TrainConfig::preset(Preset::Paper);
        assert_eq!(cfg.wm.deter_dim, 1024);
        assert_eq!(cfg.wm.z_vars, 32);
        assert_eq!(cfg.wm.z_classes, 32);
        assert_eq!(cfg.wm.feature_dim(), 2048);
        assert_eq!(cfg.wm.seq_len, 50);
        assert_eq!(cfg.wm.batch_size, 50);
        assert!((cfg.wm.beta - 0.3).abs() < 1e-12);
        assert!((cfg.wm.delta - 0.8).abs() < 1e-12);
        assert!((cfg.wm.zeta - 0.01).abs() < 1e-12);
        assert!((cfg.wm.learning_rate - 3e-4).abs() < 1e-12);
        assert!((cfg.wm.adam_eps - 1e-5).abs() < 1e-18);
        assert!((cfg.wm.weight_decay - 5e-2).abs() < 1e-12);
        assert!((cfg.wm.grad_clip - 100.0).abs() < 1e-12);

        assert_eq!(cfg.policy.k_steps, 20);
        assert_eq!(cfg.policy.hidden, vec![512, 512, 512]);
        assert_eq!(cfg.policy.t_p, 4);
        assert_eq!(cfg.policy.t_a, 4);
        assert_eq!(cfg.bc.epochs, 5000);
        assert_eq!(cfg.bc.batch, 256);
        assert!((cfg.bc.lr_initial - 1e-4).abs() < 1e-15);
        assert!((cfg.bc.lr_final - 1e-5).abs() < 1e-15);
        assert!((cfg.bc.weight_decay - 1e-6).abs() < 1e-18);
        assert!((cfg.bc.ema_decay - 0.995).abs() < 1e-12);
        assert_eq!(cfg.bc.ema_start_epoch, 20);
        assert_eq!(cfg.bc.ema_every, 10);
        assert_eq!(cfg.collect.demos_per_skill, 50);
        assert_eq!(cfg.collect.play_transitions, 500_000);

        assert_eq!(cfg.reward.epochs, 100);
        assert_eq!(cfg.reward.batch, 32);
        assert!((cfg.reward.temperature - 0.5).abs() < 1e-12);
        assert!((cfg.reward.learning_rate - 1e-6).abs() < 1e-18);
        assert!((cfg.reward.negatives_frac - 0.15).abs() < 1e-12);

        assert_eq!(cfg.finetune.k_prime, 10);
        assert!((cfg.finetune.gamma_wm - 0.999).abs() < 1e-12);
        assert!((cfg.finetune.gamma_denoise - 0.99).abs() < 1e-12);
        assert!((cfg.finetune.lambda - 0.95).abs() < 1e-12);
        assert!((cfg.finetune.alpha_bc - 0.05).abs() < 1e-12);
        assert!((cfg.finetune.actor_lr - 1e-5).abs() < 1e-15);
        assert!((cfg.finetune.critic_lr - 1e-3).abs() < 1e-15);
        assert_eq!(cfg.finetune.minibatch, 7500);
        assert_eq!(cfg.finetune.critic_hidden, vec![256, 256, 256]);
    }

    #[test]
    fn toml_overrides_merge_and_unknown_keys_fail() {
        let cfg = TrainConfig::preset(Preset::Desk);
        let over = "seed = 7\n[wm]\ndeter_dim = 64\n";
        let merged = cfg.apply_toml(over).unwrap();
        assert_eq!(merged.seed, 7);
        assert_eq!(merged.wm.deter_dim, 64);
        assert_eq!(merged.wm.z_vars, cfg.wm.z_vars);

        assert!(matches!(cfg.apply_toml("[wm]\nno_such_field = 3\n"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply_toml("[nope]\nx = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn cli_style_overrides() {
        let cfg = TrainConfig::preset(Preset::Desk);
        let out = cfg
            .apply_overrides(&[
                "seed=3".to_string(),
                "finetune.alpha_bc=0.1".to_string(),
                "policy.schedule=cosine".to_string(),
            ])
            .unwrap();
        assert_eq!(out.seed, 3);
        assert!((out.finetune.alpha_bc - 0.1).abs() < 1e-12);
        assert!(cfg.apply_overrides(&["bogus".to_string()]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig::preset(Preset::Desk);
        let text = cfg.to_toml_string();
        let back = TrainConfig::preset(Preset::Paper).apply_toml(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
