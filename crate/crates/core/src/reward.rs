//! Latent success classifier: an embedding MLP trained with a
//! temperature-scaled contrastive loss over same-label pairs, plus a
//! classifier head trained with cross-entropy. Its success probability is
//! the reward for imagined rollouts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::env::Skill;
use crate::error::{Error, Result};
use crate::graph::{GradStore, Graph, Var};
use crate::io::Container;
use crate::nn::{Activation, Mlp, ParamSet};
use crate::opt::Adam;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::wm::WorldModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// Hidden width of the two-layer embedding MLP f.
    pub embed_hidden: usize,
    /// Embedding dimensionality.
    pub embed_dim: usize,
    /// Hidden width of the two-layer classifier head g.
    pub cls_hidden: usize,
    /// Contrastive temperature τ.
    pub temperature: f64,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Fraction of non-success frames sampled as negatives.
    pub negatives_frac: f64,
    /// Fraction of episodes held out for precision/recall evaluation.
    pub holdout_frac: f64,
}

impl RewardConfig {
    pub fn desk() -> Self {
        RewardConfig {
            embed_hidden: 128,
            embed_dim: 64,
            cls_hidden: 64,
            temperature: 0.5,
            epochs: 100,
            batch: 32,
            learning_rate: 1e-4,
            negatives_frac: 0.15,
            holdout_frac: 0.2,
        }
    }

    /// Publication-scale preset. The 1e-6 learning rate matches the larger
    /// feature dimensionality there; at desk width it does not converge
    /// within 100 epochs, which is why the desk preset raises it.
    pub fn paper() -> Self {
        RewardConfig {
            embed_hidden: 512,
            embed_dim: 512,
            cls_hidden: 512,
            learning_rate: 1e-6,
            ..Self::desk()
        }
    }
}

/// Labeled latent features for classifier training.
#[derive(Clone, Debug)]
pub struct RewardDataset {
    pub features: Tensor,
    pub labels: Vec<u8>,
}

impl RewardDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// Build from featurized demo episodes: frames flagged successful are
    /// positives; a random `negatives_frac` sample of the remaining frames
    /// are negatives.
    pub fn build(
        features: &[Vec<Tensor>],
        episodes: &[Episode],
        skill: Skill,
        negatives_frac: f64,
        rng: &mut impl Rng,
    ) -> Result<RewardDataset> {
        let mut fdata = Vec::new();
        let mut labels = Vec::new();
        let mut feat_dim = 0;
        for (feats, ep) in features.iter().zip(episodes) {
            let flags = ep
                .flags
                .as_ref()
                .ok_or_else(|| Error::contract("reward dataset needs annotated episodes"))?;
            for t in 0..ep.len() {
                feat_dim = feats[t].len();
                if flags[t][skill.index()] {
                    fdata.extend_from_slice(feats[t].data());
                    labels.push(1u8);
                } else if rng.gen_bool(negatives_frac) {
                    fdata.extend_from_slice(feats[t].data());
                    labels.push(0u8);
                }
            }
        }
        let n = labels.len();
        let ds = RewardDataset { features: Tensor::new(vec![n, feat_dim], fdata)?, labels };
        if ds.positives() == 0 || ds.positives() == n {
            return Err(Error::config(format!(
                "reward dataset needs both classes (got {} positives of {n})",
                ds.positives()
            )));
        }
        Ok(ds)
    }
}

/// Embedding MLP f plus classifier head g.
#[derive(Clone, Debug)]
pub struct RewardModel {
    pub cfg: RewardConfig,
    pub feat_dim: usize,
    pub params: ParamSet,
    f_embed: Mlp,
    g_cls: Mlp,
}

impl RewardModel {
    pub fn new(cfg: RewardConfig, feat_dim: usize, seed: u64) -> Result<RewardModel> {
        if cfg.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        let mut rng = stream(seed, "reward/init");
        let mut params = ParamSet::new();
        let f_embed = Mlp::new(
            &mut params,
            &mut rng,
            "embed",
            &[feat_dim, cfg.embed_hidden, cfg.embed_dim],
            Activation::Relu,
            Activation::Identity,
        );
        let g_cls = Mlp::new(
            &mut params,
            &mut rng,
            "cls",
            &[cfg.embed_dim, cfg.cls_hidden, 2],
            Activation::Relu,
            Activation::Identity,
        );
        Ok(RewardModel { cfg, feat_dim, params, f_embed, g_cls })
    }

    pub fn embed_graph(&self, g: &mut Graph, feats: Var) -> Var {
        self.f_embed.forward(g, &self.params, feats)
    }

    pub fn logits_graph(&self, g: &mut Graph, feats: Var) -> Var {
        let e = self.embed_graph(g, feats);
        self.g_cls.forward(g, &self.params, e)
    }

    /// Success probability per row of `[R, F]` features.
    pub fn reward_batch(&self, feats: &Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let fv = g.constant(feats.clone());
        let logits = self.logits_graph(&mut g, fv);
        let probs = g.softmax_rows(logits);
        let rows = feats.shape()[0];
        (0..rows).map(|r| g.value(probs).data()[r * 2 + 1]).collect()
    }

    /// Success probability of one feature vector.
    pub fn reward(&self, feature: &Tensor) -> f64 {
        self.reward_batch(&feature.reshape(&[1, feature.len()]).unwrap())[0]
    }

    /// Precision and recall at `threshold` against labeled features.
    pub fn evaluate_pr(&self, feats: &Tensor, labels: &[u8], threshold: f64) -> Result<(f64, f64)> {
        if !labels.iter().any(|&l| l == 1) {
            return Err(Error::domain("recall undefined: no positives in ground truth"));
        }
        let probs = self.reward_batch(feats);
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, &l) in probs.iter().zip(labels) {
            let pred = *p >= threshold;
            match (pred, l == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = tp as f64 / (tp + fn_) as f64;
        Ok((precision, recall))
    }

    pub fn to_container(&self, seed: u64, wm_hash: u64) -> Container {
        let header = serde_json::json!({
            "cfg": &self.cfg,
            "feat_dim": self.feat_dim,
            "wm_hash": wm_hash,
        });
        let mut c = Container::new("reward", seed, &header.to_string());
        c.push_params("reward", &self.params);
        c
    }

    pub fn from_container(c: &Container) -> Result<(RewardModel, u64)> {
        c.expect_kind("reward")?;
        let header: serde_json::Value = serde_json::from_str(&c.config_json)?;
        let cfg: RewardConfig = serde_json::from_value(header["cfg"].clone())?;
        let feat_dim = header["feat_dim"]
            .as_u64()
            .ok_or_else(|| Error::checkpoint("reward header missing feat_dim"))? as usize;
        let wm_hash = header["wm_hash"]
            .as_u64()
            .ok_or_else(|| Error::checkpoint("reward header missing wm_hash"))?;
        let mut m = RewardModel::new(cfg, feat_dim, c.seed)?;
        c.read_params("reward", &mut m.params)?;
        Ok((m, wm_hash))
    }
}

/// Contrastive loss over cosine similarities: every same-label pair is a
/// positive; the anchor itself is excluded from the denominator; anchors
/// without a same-label partner are skipped; the result averages over
/// positive ordered pairs.
pub fn nt_xent_graph(g: &mut Graph, embeddings: Var, labels: &[u8], temperature: f64) -> Result<Var> {
    let rows = g.shape(embeddings)[0];
    if labels.len() != rows {
        return Err(Error::contract("one label per embedding row"));
    }
    let distinct = labels.iter().any(|&l| l != labels[0]);
    if !distinct {
        return Err(Error::contract("contrastive loss needs at least two classes in the batch"));
    }

    // Row-normalize embeddings (cosine similarity).
    let sq = g.mul(embeddings, embeddings);
    let norms_sq = g.sum_cols(sq);
    let norms_sq = g.add_scalar(norms_sq, 1e-12);
    let norms = g.sqrt(norms_sq);
    let inv = g.recip(norms);
    let unit = g.mul_rows(embeddings, inv);
    let unit_t = g.transpose(unit);
    let sim = g.matmul(unit, unit_t);
    let scaled = g.scale(sim, 1.0 / temperature);

    // Denominator per anchor: all off-diagonal entries.
    let mut off_diag = vec![1.0; rows * rows];
    for i in 0..rows {
        off_diag[i * rows + i] = 0.0;
    }
    let off_diag = g.constant(Tensor::new(vec![rows, rows], off_diag).unwrap());
    let expd = g.exp(scaled);
    let masked = g.mul(expd, off_diag);
    let denom = g.sum_cols(masked);
    let ln_denom = g.ln_floor(denom, 0.0);

    // Positive ordered pairs: same label, i != j.
    let mut pos = vec![0.0; rows * rows];
    let mut pair_count = 0usize;
    for i in 0..rows {
        for j in 0..rows {
            if i != j && labels[i] == labels[j] {
                pos[i * rows + j] = 1.0;
                pair_count += 1;
            }
        }
    }
    if pair_count == 0 {
        return Err(Error::contract("no positive pairs in batch"));
    }
    let pos = g.constant(Tensor::new(vec![rows, rows], pos).unwrap());
    let log_ratio = g.sub_rows(scaled, ln_denom);
    let picked = g.mul(log_ratio, pos);
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / pair_count as f64))
}

/// Value of the contrastive loss on plain tensors.
pub fn nt_xent_loss(embeddings: &Tensor, labels: &[u8], temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let e = g.constant(embeddings.clone());
    let loss = nt_xent_graph(&mut g, e, labels, temperature)?;
    Ok(g.value(loss).item())
}

/// Mean cross-entropy of 2-class logits against labels.
pub fn cross_entropy_graph(g: &mut Graph, logits: Var, labels: &[u8]) -> Var {
    let rows = g.shape(logits)[0];
    let logsm = g.log_softmax_rows(logits);
    let mut mask = vec![0.0; rows * 2];
    for (r, &l) in labels.iter().enumerate() {
        mask[r * 2 + l as usize] = 1.0;
    }
    let mask = g.constant(Tensor::new(vec![rows, 2], mask).unwrap());
    let picked = g.mul(logsm, mask);
    let total = g.sum(picked);
    g.scale(total, -1.0 / rows as f64)
}

pub struct RewardTrainReport {
    /// (nt_xent + cross-entropy) per epoch.
    pub losses: Vec<f64>,
    pub final_accuracy: f64,
}

/// Stratified minibatch training: every batch holds both classes
/// half-and-half (sampled with replacement).
pub fn train_reward(
    model: &mut RewardModel,
    dataset: &RewardDataset,
    seed: u64,
) -> Result<RewardTrainReport> {
    let pos_idx: Vec<usize> =
        (0..dataset.len()).filter(|&i| dataset.labels[i] == 1).collect();
    let neg_idx: Vec<usize> =
        (0..dataset.len()).filter(|&i| dataset.labels[i] == 0).collect();
    if pos_idx.is_empty() || neg_idx.is_empty() {
        return Err(Error::config("reward training needs both classes"));
    }
    let cfg = model.cfg.clone();
    let mut rng = stream(seed, "reward/train");
    let mut adam = Adam::new(&model.params, cfg.learning_rate, 1e-8, 0.0, None);
    let half = (cfg.batch / 2).max(2);
    let steps_per_epoch = dataset.len().div_ceil(cfg.batch).max(1);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let mut rows = Vec::with_capacity(2 * half);
            let mut labels = Vec::with_capacity(2 * half);
            for _ in 0..half {
                rows.push(pos_idx[rng.gen_range(0..pos_idx.len())]);
                labels.push(1u8);
                rows.push(neg_idx[rng.gen_range(0..neg_idx.len())]);
                labels.push(0u8);
            }
            let feats = dataset.features.take_rows(&rows)?;
            let mut g = Graph::new();
            let fv = g.constant(feats);
            let emb = model.embed_graph(&mut g, fv);
            let contrastive = nt_xent_graph(&mut g, emb, &labels, cfg.temperature)?;
            let logits = model.g_cls.forward(&mut g, &model.params, emb);
            let ce = cross_entropy_graph(&mut g, logits, &labels);
            let loss = g.add(contrastive, ce);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::numeric(format!("reward loss {value} at epoch {epoch}")));
            }
            epoch_loss += value;
            let mut grads = GradStore::new(&model.params);
            g.backward(loss, &mut grads)?;
            adam.step(&mut model.params, &grads)?;
        }
        losses.push(epoch_loss / steps_per_epoch as f64);
    }
    // Training-set accuracy at threshold 0.5.
    let probs = model.reward_batch(&dataset.features);
    let correct = probs
        .iter()
        .zip(&dataset.labels)
        .filter(|(p, &l)| (**p >= 0.5) == (l == 1))
        .count();
    Ok(RewardTrainReport { losses, final_accuracy: correct as f64 / dataset.len() as f64 })
}

/// Featurize annotated demos and split into train/held-out reward sets.
pub fn build_reward_splits(
    wm: &WorldModel,
    demos: &crate::data::Dataset,
    cfg: &RewardConfig,
    seed: u64,
    skill: Skill,
) -> Result<(RewardDataset, RewardDataset)> {
    let held = ((demos.episodes.len() as f64 * cfg.holdout_frac).round() as usize)
        .clamp(1, demos.episodes.len() - 1);
    let (train_eps, held_eps) = demos.split_tail(held);
    let mut feat_rng = stream(seed, "reward/featurize");
    let train_feats = wm.featurize_episodes(&train_eps.episodes, &mut feat_rng);
    let held_feats = wm.featurize_episodes(&held_eps.episodes, &mut feat_rng);
    let mut neg_rng = stream(seed, "reward/negatives");
    let train = RewardDataset::build(
        &train_feats,
        &train_eps.episodes,
        skill,
        cfg.negatives_frac,
        &mut neg_rng,
    )?;
    // Held-out set keeps every frame so precision/recall reflect the full
    // frame distribution.
    let held = RewardDataset::build(&held_feats, &held_eps.episodes, skill, 1.0, &mut neg_rng)?;
    Ok((train, held))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nt_xent_hand_evaluated_instance() {
        // Two identical-embedding positives and one orthogonal negative at
        // τ = 0.5: loss = −ln(e² / (e² + 1)) ≈ 0.1269.
        let emb = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let labels = [1u8, 1, 0];
        let loss = nt_xent_loss(&emb, &labels, 0.5).unwrap();
        let expect = -(f64::exp(2.0) / (f64::exp(2.0) + 1.0)).ln();
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
        assert!((loss - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn nt_xent_is_scale_invariant() {
        let mut rng = stream(3, "ntx");
        let emb = Tensor::randn(&[8, 5], 1.0, &mut rng);
        let labels = [1u8, 0, 1, 0, 1, 0, 1, 0];
        let base = nt_xent_loss(&emb, &labels, 0.5).unwrap();
        for lambda in [0.1, 3.0, 40.0] {
            let scaled =
                Tensor::new(vec![8, 5], emb.data().iter().map(|v| v * lambda).collect()).unwrap();
            let l = nt_xent_loss(&scaled, &labels, 0.5).unwrap();
            assert!((l - base).abs() < 1e-9, "λ={lambda}: {l} vs {base}");
        }
    }

    #[test]
    fn nt_xent_is_permutation_invariant() {
        let mut rng = stream(4, "ntp");
        let emb = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let labels = [1u8, 0, 1, 0, 0, 1];
        let base = nt_xent_loss(&emb, &labels, 0.5).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let emb_p = emb.take_rows(&perm).unwrap();
        let labels_p: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
        let l = nt_xent_loss(&emb_p, &labels_p, 0.5).unwrap();
        assert!((l - base).abs() < 1e-9);
    }

    #[test]
    fn nt_xent_rejects_single_class() {
        let emb = Tensor::zeros(&[4, 3]);
        assert!(matches!(
            nt_xent_loss(&emb, &[1, 1, 1, 1], 0.5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn combined_loss_gradient_matches_finite_differences() {
        let mut model = RewardModel::new(
            RewardConfig {
                embed_hidden: 8,
                embed_dim: 4,
                cls_hidden: 6,
                ..RewardConfig::desk()
            },
            3,
            5,
        )
        .unwrap();
        let mut rng = stream(6, "fd");
        let feats = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let labels = [1u8, 0, 1, 0, 1, 0];
        let mut params = std::mem::take(&mut model.params);
        crate::check::assert_grads_match(&mut params, 1e-4, 1e-6, |g, ps| {
            let mut m = model.clone();
            m.params = ps.clone();
            let fv = g.constant(feats.clone());
            let emb = m.embed_graph(g, fv);
            let contrastive = nt_xent_graph(g, emb, &labels, 0.5).unwrap();
            let logits = m.g_cls.forward(g, &m.params, emb);
            let ce = cross_entropy_graph(g, logits, &labels);
            g.add(contrastive, ce)
        });
    }

    #[test]
    fn reward_is_a_probability() {
        let model = RewardModel::new(RewardConfig::desk(), 10, 1).unwrap();
        let mut rng = stream(2, "rp");
        let feats = Tensor::randn(&[40, 10], 3.0, &mut rng);
        for p in model.reward_batch(&feats) {
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn linearly_separable_features_reach_high_accuracy() {
        // Features whose first coordinate determines the label.
        let mut rng = stream(8, "sep");
        let n = 200;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = (i % 2) as u8;
            let center = if label == 1 { 2.0 } else { -2.0 };
            let jitter: f64 = rng.sample(rand_distr::StandardNormal);
            let other: f64 = rng.sample(rand_distr::StandardNormal);
            data.push(center + 0.3 * jitter);
            data.push(other);
            labels.push(label);
        }
        let dataset = RewardDataset {
            features: Tensor::new(vec![n, 2], data).unwrap(),
            labels,
        };
        let mut model = RewardModel::new(
            RewardConfig {
                embed_hidden: 16,
                embed_dim: 8,
                cls_hidden: 8,
                epochs: 60,
                batch: 32,
                learning_rate: 3e-3,
                ..RewardConfig::desk()
            },
            2,
            3,
        )
        .unwrap();
        let report = train_reward(&mut model, &dataset, 4).unwrap();
        assert!(
            report.final_accuracy >= 0.99,
            "accuracy {} on separable data",
            report.final_accuracy
        );
        assert!(report.losses.last().unwrap() < &report.losses[0]);
    }

    #[test]
    fn precision_recall_definitions() {
        let model = {
            // Saturate the classifier head so it predicts everything
            // positive: precision equals the base rate, recall 1.
            let mut m = RewardModel::new(
                RewardConfig { embed_hidden: 4, embed_dim: 3, cls_hidden: 4, ..RewardConfig::desk() },
                2,
                7,
            )
            .unwrap();
            for id in m.params.ids().collect::<Vec<_>>() {
                let name = m.params.name(id).to_string();
                if name == "cls.1.b" {
                    m.params.get_mut(id).data_mut().copy_from_slice(&[-20.0, 20.0]);
                }
            }
            m
        };
        let feats = Tensor::zeros(&[4, 2]);
        let labels = [1u8, 0, 0, 1];
        let (p, r) = model.evaluate_pr(&feats, &labels, 0.5).unwrap();
        assert!((p - 0.5).abs() < 1e-12, "precision {p} should equal base rate");
        assert_eq!(r, 1.0);

        // No ground-truth positives: recall undefined.
        assert!(model.evaluate_pr(&feats, &[0, 0, 0, 0], 0.5).is_err());
    }
}
