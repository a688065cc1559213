//! Episode and dataset types. Observations are not stored: the renderer is
//! a pure function of scene state, so episodes keep only states, actions,
//! and success flags, and re-render views on demand.

use crate::env::{render, success_flags, Observation, SceneState, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::io::Container;
use crate::tensor::Tensor;

/// Time-indexed records from one environment run. Record `t` holds the
/// state before action `t` was taken, so all arrays have equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub seed: u64,
    pub states: Vec<SceneState>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    /// Per-frame success flags in [`crate::env::Skill::ALL`] order;
    /// `None` for unlabeled play data.
    pub flags: Option<Vec<[bool; 4]>>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Render the observation of frame `t`.
    pub fn observation(&self, t: usize) -> Observation {
        render(&self.states[t])
    }

    pub fn validate(&self) -> Result<()> {
        if self.actions.len() != self.states.len() {
            return Err(Error::contract(format!(
                "episode {}: {} states vs {} actions",
                self.id,
                self.states.len(),
                self.actions.len()
            )));
        }
        if let Some(flags) = &self.flags {
            if flags.len() != self.states.len() {
                return Err(Error::contract(format!(
                    "episode {}: {} states vs {} flag rows",
                    self.id,
                    self.states.len(),
                    flags.len()
                )));
            }
            for (t, (state, row)) in self.states.iter().zip(flags).enumerate() {
                if success_flags(state) != *row {
                    return Err(Error::contract(format!(
                        "episode {}: stored flags at frame {t} disagree with predicates",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A set of episodes plus the provenance needed to reproduce it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// "play" or "demos:<skill-name>".
    pub kind: String,
    pub seed: u64,
    /// JSON echo of the generating configuration.
    pub config_json: String,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }

    /// Split off the last `held_out` episodes (train, held-out).
    pub fn split_tail(&self, held_out: usize) -> (Dataset, Dataset) {
        let cut = self.episodes.len().saturating_sub(held_out);
        let mut train = self.clone();
        let tail = train.episodes.split_off(cut);
        let mut held = self.clone();
        held.episodes = tail;
        (train, held)
    }

    pub fn to_container(&self) -> Container {
        let total = self.num_transitions();
        let has_flags = self.episodes.iter().all(|e| e.flags.is_some());
        let mut states = Vec::with_capacity(total * STATE_DIM);
        let mut actions = Vec::with_capacity(total * ACTION_DIM);
        let mut flags = Vec::with_capacity(if has_flags { total * 4 } else { 0 });
        let mut lens = Vec::with_capacity(self.episodes.len());
        let mut ids = Vec::with_capacity(self.episodes.len());
        let mut seeds = Vec::with_capacity(self.episodes.len());
        for ep in &self.episodes {
            lens.push(ep.len() as f64);
            ids.push(ep.id as f64);
            seeds.push(ep.seed as f64);
            for s in &ep.states {
                states.extend_from_slice(&s.to_array());
            }
            for a in &ep.actions {
                actions.extend_from_slice(a);
            }
            if has_flags {
                for row in ep.flags.as_ref().unwrap() {
                    flags.extend(row.iter().map(|&b| if b { 1.0 } else { 0.0 }));
                }
            }
        }
        let mut c = Container::new(format!("dataset:{}", self.kind), self.seed, &self.config_json);
        c.push("episode_len", Tensor::from_vec(lens));
        c.push("episode_id", Tensor::from_vec(ids));
        c.push("episode_seed", Tensor::from_vec(seeds));
        c.push("states", Tensor::new(vec![total, STATE_DIM], states).unwrap());
        c.push("actions", Tensor::new(vec![total, ACTION_DIM], actions).unwrap());
        if has_flags {
            c.push("flags", Tensor::new(vec![total, 4], flags).unwrap());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Dataset> {
        let kind = c
            .kind
            .strip_prefix("dataset:")
            .ok_or_else(|| Error::checkpoint(format!("container kind '{}' is not a dataset", c.kind)))?
            .to_string();
        let lens = c.get("episode_len")?;
        let ids = c.get("episode_id")?;
        let seeds = c.get("episode_seed")?;
        let states = c.get("states")?;
        let actions = c.get("actions")?;
        let flags = c.get("flags").ok();

        let mut episodes = Vec::with_capacity(lens.len());
        let mut off = 0usize;
        for e in 0..lens.len() {
            let n = lens.data()[e] as usize;
            let mut ep = Episode {
                id: ids.data()[e] as u64,
                seed: seeds.data()[e] as u64,
                states: Vec::with_capacity(n),
                actions: Vec::with_capacity(n),
                flags: flags.as_ref().map(|_| Vec::with_capacity(n)),
            };
            for t in off..off + n {
                let mut s = [0.0; STATE_DIM];
                s.copy_from_slice(&states.data()[t * STATE_DIM..(t + 1) * STATE_DIM]);
                ep.states.push(SceneState::from_array(&s));
                let mut a = [0.0; ACTION_DIM];
                a.copy_from_slice(&actions.data()[t * ACTION_DIM..(t + 1) * ACTION_DIM]);
                ep.actions.push(a);
                if let (Some(rows), Some(f)) = (ep.flags.as_mut(), flags.as_ref()) {
                    let row = &f.data()[t * 4..(t + 1) * 4];
                    rows.push([row[0] >= 0.5, row[1] >= 0.5, row[2] >= 0.5, row[3] >= 0.5]);
                }
            }
            episodes.push(ep);
            off += n;
        }
        Ok(Dataset { kind, seed: c.seed, config_json: c.config_json.clone(), episodes })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Dataset> {
        Dataset::from_container(&Container::load(path)?)
    }
}
