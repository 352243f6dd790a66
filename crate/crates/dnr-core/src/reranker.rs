//! Second-stage reranker: scores a retrieved candidate slate with either an
//! MLP or a single attention block, with several ways of folding the
//! retriever scores into the features.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array2;
use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::util::argsort_desc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Mlp,
    Attention,
}

/// How retriever scores enter the feature block. `Denoise` wires scores in
/// like `Concat` but marks the model as the corruption-trained variant;
/// training enforces the distinction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integration {
    None,
    Concat,
    Add,
    Weight,
    Denoise,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankerConfig {
    pub backbone: Backbone,
    pub integration: Integration,
    pub hidden: usize,
    pub heads: usize,
}

impl Default for RerankerConfig {
    fn default() -> Self {
        RerankerConfig {
            backbone: Backbone::Mlp,
            integration: Integration::Concat,
            hidden: 32,
            heads: 4,
        }
    }
}

impl RerankerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if self.backbone == Backbone::Attention {
            if self.heads == 0 || self.hidden % self.heads != 0 {
                return Err(Error::Config(format!(
                    "hidden {} must divide evenly into {} heads",
                    self.hidden, self.heads
                )));
            }
        }
        Ok(())
    }
}

/// Score input for a forward pass: plain values (treated as constants) or
/// an existing n x 1 graph node, used when gradients must flow back into a
/// synthesized score vector.
pub enum ScoreInput<'a> {
    Values(&'a [f64]),
    Node(NodeId),
}

#[derive(Debug, Serialize, Deserialize)]
struct RerankerMeta {
    config: RerankerConfig,
    items: usize,
    slate_len: usize,
}

/// Initial output-head bias; sigmoid(-3) ~ 0.047, the ballpark positive
/// rate of a 50-candidate slate with a handful of relevant items.
const PRIOR_LOGIT: f64 = -3.0;

pub struct RerankerModel {
    pub theta: ParamStore,
    pub config: RerankerConfig,
    pub items: usize,
    /// Candidate list length the model was built for. The attention
    /// backbone is tied to it through its position table; the MLP simply
    /// keeps it for interface symmetry.
    pub slate_len: usize,
}

fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

impl RerankerModel {
    /// Fresh parameters. Weight scales follow 1/sqrt(fan-in); the position
    /// table starts at zero so an untrained attention model is
    /// permutation-equivariant.
    pub fn init(
        config: RerankerConfig,
        items: usize,
        slate_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if items == 0 || slate_len == 0 {
            return Err(Error::Config("reranker needs items > 0 and slate_len > 0".into()));
        }
        let h = config.hidden;
        let feat = Self::feature_dim(&config);
        let mut theta = ParamStore::new();
        let uniform = |rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng| {
            let s = 1.0 / (fan_in as f64).sqrt();
            Array2::from_fn(rows, cols, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * s)
        };
        theta.insert("item_emb", uniform(items, h, h, rng).map(|v| v * 0.5))?;
        theta.insert("user_w", uniform(h, h, h, rng))?;
        theta.insert("user_b", Array2::zeros(1, h))?;
        if config.integration == Integration::Add {
            theta.insert("score_w", uniform(1, h, 1, rng))?;
        }
        match config.backbone {
            Backbone::Mlp => {
                theta.insert("mlp_w1", uniform(feat, h, feat, rng))?;
                theta.insert("mlp_b1", Array2::zeros(1, h))?;
                theta.insert("mlp_w2", uniform(h, 1, h, rng))?;
                // slate labels are sparse; starting the head at a low
                // prior keeps early steps discriminative instead of
                // spending them pushing every probability down
                theta.insert("mlp_b2", Array2::from_vec(1, 1, vec![PRIOR_LOGIT]))?;
            }
            Backbone::Attention => {
                let hd = h / config.heads;
                theta.insert("attn_in_w", uniform(feat, h, feat, rng))?;
                theta.insert("attn_in_b", Array2::zeros(1, h))?;
                theta.insert("pos_emb", Array2::zeros(slate_len, h))?;
                for head in 0..config.heads {
                    theta.insert(&format!("attn_wq{head}"), uniform(h, hd, h, rng))?;
                    theta.insert(&format!("attn_wk{head}"), uniform(h, hd, h, rng))?;
                    theta.insert(&format!("attn_wv{head}"), uniform(h, hd, h, rng))?;
                }
                theta.insert("attn_wo", uniform(h, h, h, rng))?;
                theta.insert("attn_bo", Array2::zeros(1, h))?;
                theta.insert("out_w", uniform(h, 1, h, rng))?;
                theta.insert("out_b", Array2::from_vec(1, 1, vec![PRIOR_LOGIT]))?;
            }
        }
        Ok(RerankerModel { theta, config, items, slate_len })
    }

    fn feature_dim(config: &RerankerConfig) -> usize {
        match config.integration {
            Integration::None | Integration::Add | Integration::Weight => 2 * config.hidden,
            Integration::Concat | Integration::Denoise => 2 * config.hidden + 1,
        }
    }

    /// Forward pass over one slate, producing an n x 1 node of relevance
    /// probabilities. With `trainable` the weights enter as parameters;
    /// otherwise they are constants (used when only the scores carry
    /// gradient).
    pub fn score_slate(
        &self,
        tape: &mut Tape,
        history: &[usize],
        candidates: &[usize],
        scores: ScoreInput<'_>,
        trainable: bool,
    ) -> Result<NodeId> {
        let n = candidates.len();
        if n == 0 {
            return Err(Error::Model("score_slate: empty candidate list".into()));
        }
        if self.config.backbone == Backbone::Attention && n != self.slate_len {
            return Err(Error::Model(format!(
                "score_slate: attention model is built for slates of {}, got {n}",
                self.slate_len
            )));
        }
        if let Some(&bad) = candidates.iter().chain(history).find(|&&i| i >= self.items) {
            return Err(Error::Model(format!(
                "score_slate: item {bad} out of range for {} embeddings",
                self.items
            )));
        }
        let score_node = match scores {
            ScoreInput::Values(v) => {
                if v.len() != n {
                    return Err(Error::ShapeMismatch {
                        op: "score_slate",
                        left: format!("{n} candidates"),
                        right: format!("{} scores", v.len()),
                    });
                }
                tape.constant(Array2::col_vec(v))?
            }
            ScoreInput::Node(id) => {
                if tape.value(id).shape() != (n, 1) {
                    return Err(Error::ShapeMismatch {
                        op: "score_slate",
                        left: Error::shape_str(tape.value(id).shape()),
                        right: format!("{n}x1"),
                    });
                }
                id
            }
        };

        let h = self.config.hidden;
        let weight = |tape: &mut Tape, name: &str| -> Result<NodeId> {
            if trainable {
                tape.param(&self.theta, name)
            } else {
                let v = self.theta.value(name)?.clone();
                tape.constant(v)
            }
        };

        let item_emb = weight(tape, "item_emb")?;
        let cand_vecs = tape.gather_rows(item_emb, candidates)?;

        // user tower: mean of history embeddings through a dense layer;
        // an empty history yields a constant zero state instead
        let user_state = if history.is_empty() {
            tape.constant(Array2::zeros(1, h))?
        } else {
            let hist_vecs = tape.gather_rows(item_emb, history)?;
            let pooled = tape.mean_rows(hist_vecs)?;
            let user_w = weight(tape, "user_w")?;
            let user_b = weight(tape, "user_b")?;
            let s = tape.matmul(pooled, user_w)?;
            let s = tape.add(s, user_b)?;
            tape.relu(s)?
        };
        let user_rep = tape.repeat_rows(user_state, n)?;

        let features = match self.config.integration {
            Integration::None => tape.concat_cols(&[cand_vecs, user_rep])?,
            Integration::Concat | Integration::Denoise => {
                tape.concat_cols(&[cand_vecs, user_rep, score_node])?
            }
            Integration::Add => {
                let score_w = weight(tape, "score_w")?;
                let shift = tape.matmul(score_node, score_w)?;
                let shifted = tape.add(user_rep, shift)?;
                tape.concat_cols(&[cand_vecs, shifted])?
            }
            Integration::Weight => {
                let wide = tape.repeat_cols(score_node, h)?;
                let gated = tape.mul(cand_vecs, wide)?;
                tape.concat_cols(&[gated, user_rep])?
            }
        };

        match self.config.backbone {
            Backbone::Mlp => {
                let w1 = weight(tape, "mlp_w1")?;
                let b1 = weight(tape, "mlp_b1")?;
                let w2 = weight(tape, "mlp_w2")?;
                let b2 = weight(tape, "mlp_b2")?;
                let x = tape.matmul(features, w1)?;
                let b1r = tape.repeat_rows(b1, n)?;
                let x = tape.add(x, b1r)?;
                let x = tape.relu(x)?;
                let x = tape.matmul(x, w2)?;
                let b2r = tape.repeat_rows(b2, n)?;
                let x = tape.add(x, b2r)?;
                tape.sigmoid(x)
            }
            Backbone::Attention => {
                let hd = h / self.config.heads;
                let in_w = weight(tape, "attn_in_w")?;
                let in_b = weight(tape, "attn_in_b")?;
                let pos = weight(tape, "pos_emb")?;
                let x = tape.matmul(features, in_w)?;
                let in_br = tape.repeat_rows(in_b, n)?;
                let x = tape.add(x, in_br)?;
                let x = tape.add(x, pos)?;
                let mut heads = Vec::with_capacity(self.config.heads);
                for head in 0..self.config.heads {
                    let wq = weight(tape, &format!("attn_wq{head}"))?;
                    let wk = weight(tape, &format!("attn_wk{head}"))?;
                    let wv = weight(tape, &format!("attn_wv{head}"))?;
                    let q = tape.matmul(x, wq)?;
                    let k = tape.matmul(x, wk)?;
                    let v = tape.matmul(x, wv)?;
                    let kt = tape.transpose(k)?;
                    let logits = tape.matmul(q, kt)?;
                    let logits = tape.scale(logits, 1.0 / (hd as f64).sqrt())?;
                    let attn = tape.softmax_rows(logits)?;
                    heads.push(tape.matmul(attn, v)?);
                }
                let cat = tape.concat_cols(&heads)?;
                let wo = weight(tape, "attn_wo")?;
                let bo = weight(tape, "attn_bo")?;
                let o = tape.matmul(cat, wo)?;
                let bor = tape.repeat_rows(bo, n)?;
                let o = tape.add(o, bor)?;
                let out_w = weight(tape, "out_w")?;
                let out_b = weight(tape, "out_b")?;
                let y = tape.matmul(o, out_w)?;
                let out_br = tape.repeat_rows(out_b, n)?;
                let y = tape.add(y, out_br)?;
                tape.sigmoid(y)
            }
        }
    }

    /// Plain score vector for one slate; no gradients involved.
    pub fn score_values(
        &self,
        history: &[usize],
        candidates: &[usize],
        scores: &[f64],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.score_slate(
            &mut tape,
            history,
            candidates,
            ScoreInput::Values(scores),
            false,
        )?;
        Ok(tape.value(out).as_slice().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.theta.save(path)?;
        let meta = RerankerMeta {
            config: self.config,
            items: self.items,
            slate_len: self.slate_len,
        };
        std::fs::write(meta_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: RerankerMeta = serde_json::from_str(
            &std::fs::read_to_string(meta_path(path)).map_err(|e| {
                Error::Checkpoint(format!("missing metadata beside {}: {e}", path.display()))
            })?,
        )?;
        let theta = ParamStore::load(path)?;
        Ok(RerankerModel {
            theta,
            config: meta.config,
            items: meta.items,
            slate_len: meta.slate_len,
        })
    }

    pub fn checkpoint_hash(&self) -> u64 {
        self.theta.values_hash()
    }
}

/// Indices of the top-k scores, descending, ties by lower index.
pub fn rank_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx = argsort_desc(scores);
    idx.truncate(k);
    idx
}
