//! Synthetic interaction worlds, CSV ingestion, chronological splits, and
//! assembly of reranking samples from retriever output.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::stable_sigmoid;
use crate::error::{Error, Result};
use crate::noise::{sample_beta, sample_gaussian};
use crate::retriever::MfModel;
use crate::rng;

// ── core records ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub user: u32,
    pub item: u32,
    pub t: u64,
    pub label: u8,
}

/// A dense interaction log: user and item ids are 0..users and 0..items,
/// events sorted by (user, time).
#[derive(Debug, Clone)]
pub struct InteractionLog {
    pub users: usize,
    pub items: usize,
    pub events: Vec<Event>,
}

impl InteractionLog {
    pub fn validate(&self) -> Result<()> {
        for e in &self.events {
            if e.user as usize >= self.users || e.item as usize >= self.items {
                return Err(Error::Data(format!(
                    "event ({}, {}) outside declared world {}x{}",
                    e.user, e.item, self.users, self.items
                )));
            }
            if e.label > 1 {
                return Err(Error::Data(format!("label {} is not binary", e.label)));
            }
        }
        Ok(())
    }

    /// Event indices grouped per user, preserving chronological order.
    pub fn events_by_user(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.users];
        for (i, e) in self.events.iter().enumerate() {
            out[e.user as usize].push(i);
        }
        out
    }
}

/// Items each user has at least one positive event for, over a whole log.
pub fn positive_items_by_user(log: &InteractionLog) -> Vec<HashSet<u32>> {
    let mut out = vec![HashSet::new(); log.users];
    for e in &log.events {
        if e.label > 0 {
            out[e.user as usize].insert(e.item);
        }
    }
    out
}

// ── synthetic worlds ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    None,
    Gaussian,
    Beta,
}

/// The latent corruption channel of a synthetic world. Interaction
/// probability is a mix of the user's true preference and a raw noise draw:
/// p = (1 - mix) * preference + mix * raw.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseChannel {
    pub kind: ChannelKind,
    pub mu: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mix: f64,
}

impl Default for NoiseChannel {
    fn default() -> Self {
        // right-skewed raw draws: stray engagement noise inflates rather
        // than suppresses behavior, the regime implicit-feedback logs
        // mostly suffer from
        NoiseChannel {
            kind: ChannelKind::Beta,
            mu: 0.5,
            sigma: 0.25,
            alpha: 3.0,
            beta: 1.5,
            mix: 0.3,
        }
    }
}

impl NoiseChannel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(Error::Config(format!("channel mix must lie in [0, 1], got {}", self.mix)));
        }
        if !(self.sigma > 0.0) || !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Config("channel shape parameters must be positive".into()));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
        match self.kind {
            // inert center value; with kind none the mix is forced to zero
            ChannelKind::None => 0.5,
            ChannelKind::Gaussian => sample_gaussian(1, self.mu, self.sigma, rng)[0],
            ChannelKind::Beta => sample_beta(1, self.alpha, self.beta, rng)[0],
        }
    }

    fn effective_mix(&self) -> f64 {
        if matches!(self.kind, ChannelKind::None) {
            0.0
        } else {
            self.mix
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    pub users: usize,
    pub items: usize,
    pub latent_dim: usize,
    /// target standard deviation of the preference logits
    pub gain: f64,
    /// fraction of the catalog each user interacts with; anything below
    /// 1.0 leaves items the retriever must generalize to
    pub density: f64,
    /// how strongly interaction choice follows preference: 0 exposes
    /// uniformly, larger values concentrate exposure on liked items the
    /// way organic logs do
    pub exposure: f64,
    pub channel: NoiseChannel,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            users: 200,
            items: 500,
            latent_dim: 8,
            gain: 2.0,
            density: 0.3,
            exposure: 1.0,
            channel: NoiseChannel::default(),
            seed: 0,
        }
    }
}

/// Ground truth behind a synthetic log: the latent factors, the channel,
/// and the raw noise draw behind every event (aligned with the event list).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub latent_dim: usize,
    pub gain: f64,
    pub channel: NoiseChannel,
    pub user_factors: Vec<Vec<f64>>,
    pub item_factors: Vec<Vec<f64>>,
    pub noise: Vec<f64>,
}

impl SyntheticTruth {
    /// True preference, sigmoid of the latent dot product.
    pub fn preference(&self, user: usize, item: usize) -> f64 {
        let dot: f64 = self.user_factors[user]
            .iter()
            .zip(&self.item_factors[item])
            .map(|(&a, &b)| a * b)
            .sum();
        stable_sigmoid(dot)
    }

    /// The exact Bernoulli rate behind each event of the aligned log.
    pub fn event_probabilities(&self, log: &InteractionLog) -> Result<Vec<f64>> {
        if self.noise.len() != log.events.len() {
            return Err(Error::Data(format!(
                "truth has {} noise draws but the log has {} events; the files are misaligned",
                self.noise.len(),
                log.events.len()
            )));
        }
        let mix = self.channel.effective_mix();
        Ok(log
            .events
            .iter()
            .zip(&self.noise)
            .map(|(e, &raw)| {
                (1.0 - mix) * self.preference(e.user as usize, e.item as usize) + mix * raw
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }
}

/// Sample a full user x item grid: every user sees every item once, in a
/// per-user random order that defines the timestamps.
pub fn generate_synthetic(params: &SyntheticParams) -> Result<(InteractionLog, SyntheticTruth)> {
    if params.users == 0 || params.items == 0 {
        return Err(Error::Config("synthetic world needs at least one user and item".into()));
    }
    if !(params.gain > 0.0) {
        return Err(Error::Config(format!("gain must be positive, got {}", params.gain)));
    }
    if !(params.density > 0.0 && params.density <= 1.0) {
        return Err(Error::Config(format!(
            "density must lie in (0, 1], got {}",
            params.density
        )));
    }
    if !(params.exposure >= 0.0 && params.exposure.is_finite()) {
        return Err(Error::Config(format!(
            "exposure must be finite and non-negative, got {}",
            params.exposure
        )));
    }
    params.channel.validate()?;
    let mut rng = rng::stream(params.seed, rng::STREAM_WORLD);

    // factor scale chosen so the logit standard deviation lands on `gain`
    let scale = (params.gain / (params.latent_dim as f64).sqrt()).sqrt();
    let mut factor_rows = |count: usize| -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| {
                crate::noise::sample_gaussian_unclamped(params.latent_dim, 0.0, scale, &mut rng)
            })
            .collect()
    };
    let user_factors = factor_rows(params.users);
    let item_factors = factor_rows(params.items);

    let truth_scaffold = SyntheticTruth {
        latent_dim: params.latent_dim,
        gain: params.gain,
        channel: params.channel,
        user_factors,
        item_factors,
        noise: Vec::new(),
    };

    let mix = params.channel.effective_mix();
    let per_user = ((params.density * params.items as f64).round() as usize).clamp(1, params.items);
    let mut events = Vec::with_capacity(params.users * per_user);
    let mut noise = Vec::with_capacity(params.users * per_user);
    let mut keyed: Vec<(f64, u32)> = Vec::with_capacity(params.items);
    for u in 0..params.users {
        // Gumbel-top-k: exposure 0 degenerates to a uniform draw, larger
        // values concentrate the chosen subset on high-preference items
        keyed.clear();
        for i in 0..params.items {
            let dot: f64 = truth_scaffold.user_factors[u]
                .iter()
                .zip(&truth_scaffold.item_factors[i])
                .map(|(&a, &b)| a * b)
                .sum();
            let uniform = rng.random::<f64>().max(1e-300);
            let gumbel = -(-uniform.ln()).ln();
            keyed.push((params.exposure * dot + gumbel, i as u32));
        }
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut order: Vec<u32> = keyed[..per_user].iter().map(|&(_, i)| i).collect();
        order.shuffle(&mut rng);
        for (t, &item) in order.iter().enumerate() {
            let raw = params.channel.draw(&mut rng);
            let p = (1.0 - mix) * truth_scaffold.preference(u, item as usize) + mix * raw;
            let label = (rng.random::<f64>() < p) as u8;
            events.push(Event { user: u as u32, item, t: t as u64, label });
            noise.push(raw);
        }
    }

    // relabel ids densely by first appearance in event order, the same
    // rule csv ingestion applies, so a written log reads back verbatim;
    // factor rows move along with their ids
    let mut user_map = vec![usize::MAX; params.users];
    let mut item_map = vec![usize::MAX; params.items];
    let mut next_user = 0usize;
    let mut next_item = 0usize;
    for e in &mut events {
        let u = e.user as usize;
        if user_map[u] == usize::MAX {
            user_map[u] = next_user;
            next_user += 1;
        }
        let i = e.item as usize;
        if item_map[i] == usize::MAX {
            item_map[i] = next_item;
            next_item += 1;
        }
        e.user = user_map[u] as u32;
        e.item = item_map[i] as u32;
    }
    // sparse worlds can leave ids unseen; they still need slots so the
    // factor tables keep their declared sizes
    for slot in user_map.iter_mut().filter(|s| **s == usize::MAX) {
        *slot = next_user;
        next_user += 1;
    }
    for slot in item_map.iter_mut().filter(|s| **s == usize::MAX) {
        *slot = next_item;
        next_item += 1;
    }
    let mut user_factors = vec![Vec::new(); params.users];
    let mut item_factors = vec![Vec::new(); params.items];
    for (old, row) in truth_scaffold.user_factors.into_iter().enumerate() {
        user_factors[user_map[old]] = row;
    }
    for (old, row) in truth_scaffold.item_factors.into_iter().enumerate() {
        item_factors[item_map[old]] = row;
    }

    let log = InteractionLog { users: params.users, items: params.items, events };
    log.validate()?;
    let truth = SyntheticTruth {
        latent_dim: params.latent_dim,
        gain: params.gain,
        channel: params.channel,
        user_factors,
        item_factors,
        noise,
    };
    Ok((log, truth))
}

// ── csv io ───────────────────────────────────────────────────────────────

const CSV_HEADER: [&str; 4] = ["user_id", "item_id", "timestamp", "label"];

/// Read an interaction CSV, re-indexing raw ids densely by first
/// appearance. Any malformed cell is a hard error naming the line.
pub fn load_csv(path: &Path) -> Result<InteractionLog> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::CsvRow { line: 1, reason: e.to_string() })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::CsvRow {
            line: 1,
            reason: format!("header must be {}, got {}", CSV_HEADER.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        });
    }

    let mut user_ids: std::collections::HashMap<String, u32> = Default::default();
    let mut item_ids: std::collections::HashMap<String, u32> = Default::default();
    let mut events = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::CsvRow {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 4 {
            return Err(Error::CsvRow {
                line,
                reason: format!("expected 4 columns, got {}", record.len()),
            });
        }
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let next_user = user_ids.len() as u32;
        let user = *user_ids.entry(field(0).to_string()).or_insert(next_user);
        let next_item = item_ids.len() as u32;
        let item = *item_ids.entry(field(1).to_string()).or_insert(next_item);
        let t: u64 = field(2).parse().map_err(|_| Error::CsvRow {
            line,
            reason: format!("timestamp `{}` is not an integer", field(2)),
        })?;
        let label: u8 = match field(3) {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::CsvRow {
                    line,
                    reason: format!("label `{other}` must be 0 or 1"),
                })
            }
        };
        events.push(Event { user, item, t, label });
    }
    // stable sort keeps file order within equal (user, t) pairs
    events.sort_by_key(|e| (e.user, e.t));
    let log = InteractionLog { users: user_ids.len(), items: item_ids.len(), events };
    log.validate()?;
    Ok(log)
}

pub fn write_csv(log: &InteractionLog, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for e in &log.events {
        w.write_record([
            e.user.to_string(),
            e.item.to_string(),
            e.t.to_string(),
            e.label.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ── filtering and splitting ──────────────────────────────────────────────

/// Drop users and items with fewer than `min_interactions` events,
/// iterating to a fixed point, then re-index ids densely.
pub fn filter_min_interactions(
    log: &InteractionLog,
    min_interactions: usize,
) -> Result<InteractionLog> {
    let mut events = log.events.clone();
    loop {
        let mut user_count = vec![0usize; log.users];
        let mut item_count = vec![0usize; log.items];
        for e in &events {
            user_count[e.user as usize] += 1;
            item_count[e.item as usize] += 1;
        }
        let before = events.len();
        events.retain(|e| {
            user_count[e.user as usize] >= min_interactions
                && item_count[e.item as usize] >= min_interactions
        });
        if events.is_empty() {
            return Err(Error::FilterEmpty { threshold: min_interactions });
        }
        if events.len() == before {
            break;
        }
    }
    // dense re-index in ascending id order, so a filter that drops nothing
    // is the identity and synthetic truth sidecars stay aligned
    let mut users: Vec<u32> = events.iter().map(|e| e.user).collect();
    let mut items: Vec<u32> = events.iter().map(|e| e.item).collect();
    users.sort_unstable();
    users.dedup();
    items.sort_unstable();
    items.dedup();
    let user_map: std::collections::HashMap<u32, u32> =
        users.iter().enumerate().map(|(i, &u)| (u, i as u32)).collect();
    let item_map: std::collections::HashMap<u32, u32> =
        items.iter().enumerate().map(|(i, &v)| (v, i as u32)).collect();
    for e in &mut events {
        e.user = user_map[&e.user];
        e.item = item_map[&e.item];
    }
    let filtered = InteractionLog { users: user_map.len(), items: item_map.len(), events };
    filtered.validate()?;
    Ok(filtered)
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<Event>,
    pub test: Vec<Event>,
}

/// Per-user chronological split: the earliest ceil(ratio * len) events go
/// to train. Users with a single event contribute no test data.
pub fn build_retriever_split(log: &InteractionLog, ratio: f64) -> Result<Split> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1], got {ratio}")));
    }
    let mut split = Split { train: Vec::new(), test: Vec::new() };
    for indices in log.events_by_user() {
        let len = indices.len();
        let cut = if len < 2 { len } else { ((ratio * len as f64).ceil() as usize).min(len) };
        for (pos, &i) in indices.iter().enumerate() {
            if pos < cut {
                split.train.push(log.events[i]);
            } else {
                split.test.push(log.events[i]);
            }
        }
    }
    if split.test.is_empty() {
        log::warn!("retriever split has no test events (ratio {ratio})");
    }
    Ok(split)
}

// ── reranking samples ────────────────────────────────────────────────────

/// One reranking case: a user, their recent positive history, the
/// retriever's candidate slate with scores in retrieval order, and the
/// candidates' held-out relevance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankSample {
    pub user: u32,
    pub history: Vec<u32>,
    pub candidates: Vec<u32>,
    pub x: Vec<f64>,
    pub z: Vec<u8>,
}

impl RerankSample {
    /// Whether any candidate is relevant; samples without positives stay in
    /// the dataset but evaluation tracks them separately.
    pub fn has_positive(&self) -> bool {
        self.z.iter().any(|&z| z > 0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.candidates.len();
        if self.x.len() != n || self.z.len() != n {
            return Err(Error::Data(format!(
                "sample for user {}: {} candidates, {} scores, {} labels",
                self.user,
                n,
                self.x.len(),
                self.z.len()
            )));
        }
        if self.x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Data(format!(
                "sample for user {}: scores must lie in [0, 1]",
                self.user
            )));
        }
        if self.z.iter().any(|&z| z > 1) {
            return Err(Error::Data(format!(
                "sample for user {}: labels must be binary",
                self.user
            )));
        }
        if self.x.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Data(format!(
                "sample for user {}: candidate order must follow descending score",
                self.user
            )));
        }
        let unique: HashSet<u32> = self.candidates.iter().copied().collect();
        if unique.len() != n {
            return Err(Error::Data(format!(
                "sample for user {}: duplicate candidate ids",
                self.user
            )));
        }
        Ok(())
    }
}

/// Assemble one sample per user. History is the user's last
/// `history_len` positive train events; candidates are the retriever's
/// top-n excluding every consumed train positive, not just the history
/// window, so already-consumed items cannot crowd the slate; relevance
/// marks candidates appearing with a positive label among the user's
/// last `k` held-out events.
pub fn build_rerank_dataset(
    log: &InteractionLog,
    split: &Split,
    retriever: &MfModel,
    n: usize,
    k: usize,
    history_len: usize,
) -> Result<Vec<RerankSample>> {
    if n == 0 {
        return Err(Error::Config("candidate list size n must be positive".into()));
    }
    if n + history_len > log.items {
        return Err(Error::Config(format!(
            "n + history_len = {} exceeds the {} items available",
            n + history_len,
            log.items
        )));
    }
    let mut train_by_user: Vec<Vec<&Event>> = vec![Vec::new(); log.users];
    for e in &split.train {
        train_by_user[e.user as usize].push(e);
    }
    let mut test_by_user: Vec<Vec<&Event>> = vec![Vec::new(); log.users];
    for e in &split.test {
        test_by_user[e.user as usize].push(e);
    }

    let mut samples = Vec::with_capacity(log.users);
    for u in 0..log.users {
        let positives: Vec<u32> = train_by_user[u]
            .iter()
            .filter(|e| e.label > 0)
            .map(|e| e.item)
            .collect();
        let start = positives.len().saturating_sub(history_len);
        let history: Vec<u32> = positives[start..].to_vec();
        let exclude: HashSet<u32> = positives.iter().copied().collect();

        let exposure = &test_by_user[u][test_by_user[u].len().saturating_sub(k)..];
        let relevant: HashSet<u32> =
            exposure.iter().filter(|e| e.label > 0).map(|e| e.item).collect();

        let top = retriever.top_n(u, n, &exclude)?;
        let sample = RerankSample {
            user: u as u32,
            history,
            candidates: top.iter().map(|&(i, _)| i).collect(),
            x: top.iter().map(|&(_, s)| s).collect(),
            z: top
                .iter()
                .map(|&(i, _)| relevant.contains(&i) as u8)
                .collect(),
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// One JSON object per line.
pub fn save_samples(samples: &[RerankSample], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<Vec<RerankSample>> {
    let f = std::fs::File::open(path)?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: RerankSample = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("samples line {}: {e}", i + 1))
        })?;
        sample.validate()?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::Data("sample file holds no samples".into()));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_params(users: usize, items: usize, seed: u64) -> SyntheticParams {
        SyntheticParams {
            users,
            items,
            latent_dim: 4,
            gain: 2.0,
            channel: NoiseChannel { kind: ChannelKind::None, ..Default::default() },
            density: 1.0,
            exposure: 0.0,
            seed,
        }
    }

    #[test]
    fn full_density_world_is_a_full_grid() {
        let (log, truth) = generate_synthetic(&quiet_params(5, 12, 3)).unwrap();
        assert_eq!(log.events.len(), 60);
        assert_eq!(truth.noise.len(), 60);
        for indices in log.events_by_user() {
            assert_eq!(indices.len(), 12);
            let items: HashSet<u32> =
                indices.iter().map(|&i| log.events[i].item).collect();
            assert_eq!(items.len(), 12);
            for (pos, &i) in indices.iter().enumerate() {
                assert_eq!(log.events[i].t, pos as u64);
            }
        }
    }

    #[test]
    fn sparse_world_leaves_most_of_the_catalog_untouched() {
        let mut params = quiet_params(8, 40, 17);
        params.density = 0.25;
        let (log, truth) = generate_synthetic(&params).unwrap();
        // round(0.25 * 40) = 10 interactions per user, each with a distinct item
        for indices in log.events_by_user() {
            assert_eq!(indices.len(), 10);
            let items: HashSet<u32> =
                indices.iter().map(|&i| log.events[i].item).collect();
            assert_eq!(items.len(), 10);
        }
        // ids stay dense even though each user touches a different subset
        assert_eq!(log.items, 40);
        assert_eq!(truth.item_factors.len(), 40);
        let subsets: HashSet<Vec<u32>> = log
            .events_by_user()
            .iter()
            .map(|indices| {
                let mut s: Vec<u32> = indices.iter().map(|&i| log.events[i].item).collect();
                s.sort_unstable();
                s
            })
            .collect();
        assert!(subsets.len() > 1, "users should not all share one subset");

        params.density = 0.0;
        assert!(generate_synthetic(&params).is_err());
        params.density = 1.2;
        assert!(generate_synthetic(&params).is_err());
    }

    #[test]
    fn zero_noise_channel_means_probabilities_equal_preferences() {
        let (log, truth) = generate_synthetic(&quiet_params(4, 9, 7)).unwrap();
        let probs = truth.event_probabilities(&log).unwrap();
        for (e, p) in log.events.iter().zip(probs) {
            assert_eq!(p, truth.preference(e.user as usize, e.item as usize));
        }
    }

    #[test]
    fn positive_rate_matches_event_probabilities() {
        let mut params = quiet_params(60, 200, 11);
        params.channel = NoiseChannel::default();
        let (log, truth) = generate_synthetic(&params).unwrap();
        let probs = truth.event_probabilities(&log).unwrap();
        let expected: f64 = probs.iter().sum();
        let observed: f64 = log.events.iter().map(|e| e.label as f64).sum();
        let sd: f64 = probs.iter().map(|p| p * (1.0 - p)).sum::<f64>().sqrt();
        assert!(
            (observed - expected).abs() < 4.0 * sd.max(1.0),
            "observed {observed} expected {expected} sd {sd}"
        );
    }

    #[test]
    fn filter_cascades_to_fixed_point() {
        // item 2 appears once; dropping it pushes user 2 below threshold
        let events = vec![
            Event { user: 0, item: 0, t: 0, label: 1 },
            Event { user: 0, item: 1, t: 1, label: 0 },
            Event { user: 1, item: 0, t: 0, label: 1 },
            Event { user: 1, item: 1, t: 1, label: 1 },
            Event { user: 2, item: 1, t: 0, label: 0 },
            Event { user: 2, item: 2, t: 1, label: 1 },
        ];
        let log = InteractionLog { users: 3, items: 3, events };
        let filtered = filter_min_interactions(&log, 2).unwrap();
        assert_eq!(filtered.users, 2);
        assert_eq!(filtered.items, 2);
        assert_eq!(filtered.events.len(), 4);
        let mut uc = vec![0; filtered.users];
        let mut ic = vec![0; filtered.items];
        for e in &filtered.events {
            uc[e.user as usize] += 1;
            ic[e.item as usize] += 1;
        }
        assert!(uc.iter().chain(&ic).all(|&c| c >= 2));
        assert!(matches!(
            filter_min_interactions(&log, 10),
            Err(Error::FilterEmpty { threshold: 10 })
        ));
    }

    #[test]
    fn filter_that_drops_nothing_is_the_identity() {
        let (log, _) = generate_synthetic(&quiet_params(12, 20, 3)).unwrap();
        let filtered = filter_min_interactions(&log, 2).unwrap();
        assert_eq!(filtered.users, log.users);
        assert_eq!(filtered.items, log.items);
        assert_eq!(filtered.events, log.events);
    }

    #[test]
    fn split_respects_chronology_and_edge_ratios() {
        let (log, _) = generate_synthetic(&quiet_params(3, 10, 1)).unwrap();
        let split = build_retriever_split(&log, 0.8).unwrap();
        assert_eq!(split.train.len(), 24);
        assert_eq!(split.test.len(), 6);
        for e in &split.test {
            assert!(e.t >= 8);
        }
        let all = build_retriever_split(&log, 1.0).unwrap();
        assert!(all.test.is_empty());
        assert!(build_retriever_split(&log, 0.0).is_err());
        // single-event users go entirely to train
        let tiny = InteractionLog {
            users: 1,
            items: 1,
            events: vec![Event { user: 0, item: 0, t: 0, label: 1 }],
        };
        let s = build_retriever_split(&tiny, 0.5).unwrap();
        assert_eq!(s.train.len(), 1);
        assert!(s.test.is_empty());
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = std::env::temp_dir().join("dnr_core_csv_tests");
        std::fs::create_dir_all(&dir).unwrap();

        let (log, _) = generate_synthetic(&quiet_params(3, 5, 9)).unwrap();
        let path = dir.join("log.csv");
        write_csv(&log, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.users, log.users);
        assert_eq!(back.items, log.items);
        assert_eq!(back.events, log.events);

        let bad_label = dir.join("bad_label.csv");
        std::fs::write(&bad_label, "user_id,item_id,timestamp,label\n1,2,3,1\n1,3,4,7\n").unwrap();
        let err = load_csv(&bad_label).unwrap_err();
        assert!(matches!(err, Error::CsvRow { line: 3, .. }), "{err}");

        let missing = dir.join("missing.csv");
        std::fs::write(&missing, "user_id,item_id,timestamp,label\n1,2,3\n").unwrap();
        assert!(load_csv(&missing).is_err());

        let header = dir.join("header.csv");
        std::fs::write(&header, "user,item,ts,y\n1,2,3,1\n").unwrap();
        let err = load_csv(&header).unwrap_err();
        assert!(matches!(err, Error::CsvRow { line: 1, .. }), "{err}");

        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_reindexes_by_first_appearance() {
        let dir = std::env::temp_dir().join("dnr_core_csv_reindex");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("raw.csv");
        std::fs::write(
            &path,
            "user_id,item_id,timestamp,label\n900,77,5,1\n3,77,1,0\n900,12,2,1\n",
        )
        .unwrap();
        let log = load_csv(&path).unwrap();
        assert_eq!(log.users, 2);
        assert_eq!(log.items, 2);
        // user 900 appeared first -> id 0; its t=2 event precedes t=5
        assert_eq!(log.events[0], Event { user: 0, item: 1, t: 2, label: 1 });
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rerank_dataset_shapes_and_exclusions() {
        let (log, _) = generate_synthetic(&quiet_params(12, 40, 21)).unwrap();
        let split = build_retriever_split(&log, 0.8).unwrap();
        let model = crate::retriever::train_mf(
            &split.train,
            log.users,
            log.items,
            &crate::retriever::MfConfig { epochs: 2, ..Default::default() },
        )
        .unwrap();
        let samples = build_rerank_dataset(&log, &split, &model, 10, 4, 5).unwrap();
        assert_eq!(samples.len(), log.users);
        for s in &samples {
            assert_eq!(s.candidates.len(), 10);
            let unique: HashSet<u32> = s.candidates.iter().copied().collect();
            assert_eq!(unique.len(), 10);
            for h in &s.history {
                assert!(!unique.contains(h), "history item {h} leaked into candidates");
            }
            assert!(s.history.len() <= 5);
        }
        // oversized request is rejected up front
        assert!(build_rerank_dataset(&log, &split, &model, 40, 4, 5).is_err());
    }

    #[test]
    fn samples_jsonl_roundtrip() {
        let dir = std::env::temp_dir().join("dnr_core_jsonl_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("samples.jsonl");
        let samples = vec![RerankSample {
            user: 3,
            history: vec![1, 2],
            candidates: vec![5, 6, 7],
            x: vec![0.9, 0.5, 0.1],
            z: vec![0, 1, 0],
        }];
        save_samples(&samples, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"user\":3"));
        let back = load_samples(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].candidates, samples[0].candidates);
        assert!(back[0].has_positive());

        std::fs::write(&path, "{\"user\":0}\n").unwrap();
        assert!(load_samples(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
