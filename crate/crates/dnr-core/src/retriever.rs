//! First-stage retriever: logistic matrix factorization trained by SGD
//! over positive events with uniformly sampled negatives.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array2;
use crate::autodiff::{stable_sigmoid, ParamStore};
use crate::datagen::{positive_items_by_user, Event, InteractionLog};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfConfig {
    pub latent_dim: usize,
    pub lr: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub reg: f64,
    pub seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        MfConfig {
            latent_dim: 16,
            lr: 0.05,
            epochs: 10,
            negatives_per_positive: 4,
            reg: 1e-4,
            seed: 0,
        }
    }
}

pub struct MfModel {
    pub user_emb: Array2,
    pub item_emb: Array2,
}

impl MfModel {
    pub fn users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn items(&self) -> usize {
        self.item_emb.rows()
    }

    /// Predicted interaction probability, sigmoid of the factor dot product.
    pub fn score(&self, user: usize, item: usize) -> f64 {
        let dot: f64 = self
            .user_emb
            .row(user)
            .iter()
            .zip(self.item_emb.row(item))
            .map(|(&a, &b)| a * b)
            .sum();
        stable_sigmoid(dot)
    }

    /// Top-n items for a user by score, excluding a set of items, ties by
    /// lower item id. Errors when fewer than n items remain.
    pub fn top_n(
        &self,
        user: usize,
        n: usize,
        exclude: &HashSet<u32>,
    ) -> Result<Vec<(u32, f64)>> {
        let available = self.items() - exclude.len();
        if available < n {
            return Err(Error::Data(format!(
                "top_n: need {n} items but only {available} are not excluded"
            )));
        }
        let mut scored: Vec<(u32, f64)> = (0..self.items() as u32)
            .filter(|i| !exclude.contains(i))
            .map(|i| (i, self.score(user, i as usize)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(n);
        Ok(scored)
    }

    fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("user_emb", self.user_emb.clone()).expect("fresh store");
        s.insert("item_emb", self.item_emb.clone()).expect("fresh store");
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_store().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = ParamStore::load(path)?;
        Ok(MfModel {
            user_emb: store.value("user_emb")?.clone(),
            item_emb: store.value("item_emb")?.clone(),
        })
    }

    pub fn checkpoint_hash(&self) -> u64 {
        crate::util::fnv1a64(&self.to_store().to_bytes())
    }
}

/// Train factors on the chronological train split by BCE over observed
/// labels; each positive event additionally draws `negatives_per_positive`
/// uniform negatives from the user's non-interacted items.
pub fn train_mf(
    events: &[Event],
    users: usize,
    items: usize,
    cfg: &MfConfig,
) -> Result<MfModel> {
    if users == 0 || items == 0 {
        return Err(Error::Data("train_mf over an empty world".into()));
    }
    let mut rng = rng::stream(cfg.seed, rng::STREAM_RETRIEVER);
    let d = cfg.latent_dim;
    let scale = 0.1;
    let mut user_emb = Array2::from_fn(users, d, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * scale);
    let mut item_emb = Array2::from_fn(items, d, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * scale);

    // negatives are sampled from items the user never interacted with in
    // the train split; events with explicit label 0 train directly instead
    let mut seen_by_user: Vec<HashSet<u32>> = vec![HashSet::new(); users];
    let mut any_positive = false;
    for e in events {
        seen_by_user[e.user as usize].insert(e.item);
        any_positive |= e.label > 0;
    }
    if !any_positive {
        return Err(Error::Data("train_mf: no positive events in the train split".into()));
    }
    let mut saturated_users: HashSet<u32> = HashSet::new();
    for (u, set) in seen_by_user.iter().enumerate() {
        if set.len() == items {
            // no unseen items exist for this user; its updates skip sampling
            log::warn!("retriever: user {u} interacted with every item, sampling no negatives");
            saturated_users.insert(u as u32);
        }
    }

    let sgd = |user_emb: &mut Array2, item_emb: &mut Array2, u: usize, i: usize, y: f64, lr: f64, reg: f64| {
        let dot: f64 = user_emb
            .row(u)
            .iter()
            .zip(item_emb.row(i))
            .map(|(&a, &b)| a * b)
            .sum();
        let g = stable_sigmoid(dot) - y;
        for k in 0..d {
            let uv = user_emb.get(u, k);
            let iv = item_emb.get(i, k);
            user_emb.set(u, k, uv - lr * (g * iv + reg * uv));
            item_emb.set(i, k, iv - lr * (g * uv + reg * iv));
        }
    };

    let mut order: Vec<usize> = (0..events.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &idx in &order {
            let e = &events[idx];
            let (u, i) = (e.user, e.item);
            let y = f64::from(e.label);
            sgd(&mut user_emb, &mut item_emb, u as usize, i as usize, y, cfg.lr, cfg.reg);
            if e.label == 0 || saturated_users.contains(&u) {
                continue;
            }
            for _ in 0..cfg.negatives_per_positive {
                // rejection sampling; the saturated-user check above bounds it
                let neg = loop {
                    let cand: u32 = rng.random_range(0..items as u32);
                    if !seen_by_user[u as usize].contains(&cand) {
                        break cand;
                    }
                };
                sgd(&mut user_emb, &mut item_emb, u as usize, neg as usize, 0.0, cfg.lr, cfg.reg);
            }
        }
    }
    Ok(MfModel { user_emb, item_emb })
}

/// Held-out AUC: every positive test event contributes its score; each is
/// paired with one uniformly sampled item that is never positive for the
/// user anywhere in the log. Returns None when no pair can be formed.
pub fn evaluate_auc(
    model: &MfModel,
    log_full: &InteractionLog,
    test: &[Event],
    seed: u64,
) -> Option<f64> {
    evaluate_auc_with(|u, i| model.score(u, i), model.items(), log_full, test, seed)
}

/// Same pairing protocol with an arbitrary scorer. Identical (seed, test)
/// arguments draw identical negatives, so two scorers compare on the same
/// pairs; the acceptance oracle scores ground-truth preferences this way.
pub fn evaluate_auc_with(
    score: impl Fn(usize, usize) -> f64,
    items: usize,
    log_full: &InteractionLog,
    test: &[Event],
    seed: u64,
) -> Option<f64> {
    let pos_by_user = positive_items_by_user(log_full);
    let mut rng = rng::stream(seed, rng::STREAM_EVAL);
    let items = items as u32;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for e in test {
        if e.label == 0 {
            continue;
        }
        let u = e.user as usize;
        if pos_by_user[u].len() >= items as usize {
            continue;
        }
        let neg = loop {
            let cand: u32 = rng.random_range(0..items);
            if !pos_by_user[u].contains(&cand) {
                break cand;
            }
        };
        scores.push(score(u, e.item as usize));
        labels.push(1u8);
        scores.push(score(u, neg as usize));
        labels.push(0u8);
    }
    crate::metrics::auc(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_retriever_split, generate_synthetic, ChannelKind, NoiseChannel, SyntheticParams};

    fn small_world() -> (InteractionLog, crate::datagen::SyntheticTruth) {
        generate_synthetic(&SyntheticParams {
            users: 30,
            items: 60,
            latent_dim: 4,
            gain: 2.0,
            channel: NoiseChannel { kind: ChannelKind::None, ..Default::default() },
            density: 0.5,
            exposure: 1.0,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (log, _) = small_world();
        let split = build_retriever_split(&log, 0.8).unwrap();
        let cfg = MfConfig { epochs: 2, ..Default::default() };
        let a = train_mf(&split.train, log.users, log.items, &cfg).unwrap();
        let b = train_mf(&split.train, log.users, log.items, &cfg).unwrap();
        assert_eq!(a.checkpoint_hash(), b.checkpoint_hash());
        let c = train_mf(&split.train, log.users, log.items, &MfConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.checkpoint_hash(), c.checkpoint_hash());
    }

    #[test]
    fn learns_better_than_chance() {
        let (log, _) = small_world();
        let split = build_retriever_split(&log, 0.8).unwrap();
        let model = train_mf(&split.train, log.users, log.items, &MfConfig::default()).unwrap();
        let auc = evaluate_auc(&model, &log, &split.test, 0).unwrap();
        assert!(auc > 0.6, "held-out auc {auc}");
    }

    #[test]
    fn top_n_excludes_and_breaks_ties_by_id() {
        let model = MfModel {
            user_emb: Array2::from_vec(1, 1, vec![0.0]),
            item_emb: Array2::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]),
        };
        // zero user vector makes every score 0.5: pure id tie-break
        let exclude: HashSet<u32> = [1u32].into_iter().collect();
        let top = model.top_n(0, 2, &exclude).unwrap();
        let ids: Vec<u32> = top.iter().map(|&(i, _)| i).collect();
        assert_eq!(ids, vec![0, 2]);
        assert!(model.top_n(0, 4, &exclude).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (log, _) = small_world();
        let split = build_retriever_split(&log, 0.8).unwrap();
        let cfg = MfConfig { epochs: 1, ..Default::default() };
        let model = train_mf(&split.train, log.users, log.items, &cfg).unwrap();
        let dir = std::env::temp_dir().join("dnr_core_mf_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("retriever.ckpt");
        model.save(&path).unwrap();
        let back = MfModel::load(&path).unwrap();
        assert_eq!(back.checkpoint_hash(), model.checkpoint_hash());
        std::fs::remove_dir_all(&dir).ok();
    }
}
