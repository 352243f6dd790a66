//! Training objectives and the two-phase training loop.
//!
//! The reranker always minimizes a direct likelihood term on observed
//! retriever scores. The denoising variant adds a term on corrupted scores:
//! heuristic noise during warm-up, then noise from an adversarial generator
//! that is itself trained to make the reranker misjudge relevance while its
//! synthesized scores stay close to the real score distribution.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::array::Array2;
use crate::autodiff::{AdamConfig, NodeId, Tape};
use crate::datagen::RerankSample;
use crate::error::{Error, Result};
use crate::metrics;
use crate::noise::{
    heuristic_noise, synthesize_scores, synthesize_scores_values, GeneratorModel, NoiseKind,
    NoiseSpec,
};
use crate::reranker::{Integration, RerankerConfig, RerankerModel, ScoreInput};
use crate::retriever::MfModel;
use crate::rng;

// ── configuration ────────────────────────────────────────────────────────

/// RBF bandwidth policy for the distribution-matching term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthSpec {
    /// median pairwise distance of the real score pool, fixed per run
    Median,
    Fixed(f64),
}

impl Serialize for BandwidthSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BandwidthSpec::Median => s.serialize_str("median"),
            BandwidthSpec::Fixed(h) => s.serialize_f64(*h),
        }
    }
}

impl<'de> Deserialize<'de> for BandwidthSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let v = serde_json::Value::deserialize(d)?;
        match &v {
            serde_json::Value::String(s) if s == "median" => Ok(BandwidthSpec::Median),
            serde_json::Value::Number(n) => n
                .as_f64()
                .filter(|h| *h > 0.0)
                .map(BandwidthSpec::Fixed)
                .ok_or_else(|| D::Error::custom("fixed bandwidth must be a positive number")),
            _ => Err(D::Error::custom(
                "mmd_bandwidth must be \"median\" or a positive number",
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DnrConfig {
    /// corruption mix: x' = lambda_c * noise + (1 - lambda_c) * z
    pub lambda_c: f64,
    /// weight of the corrupted-score term in the reranker loss
    pub lambda_m: f64,
    /// warm-up epochs before the generator starts training
    pub lambda_e: usize,
    pub heuristic: NoiseSpec,
    pub lr_theta: f64,
    pub lr_phi: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub mmd_bandwidth: BandwidthSpec,
    /// cap on pooled score points entering the quadratic MMD sums
    pub mmd_max_points: usize,
    pub val_fraction: f64,
    pub gen_hidden: usize,
}

impl Default for DnrConfig {
    fn default() -> Self {
        DnrConfig {
            lambda_c: 0.4,
            lambda_m: 0.4,
            lambda_e: 5,
            // warm-up draws from the u-shaped Beta(0.5, 0.5) by default;
            // a gaussian heuristic stays selectable through the config
            heuristic: NoiseSpec { kind: NoiseKind::Beta, ..NoiseSpec::default() },
            lr_theta: 1e-2,
            lr_phi: 1e-2,
            epochs: 30,
            batch_size: 256,
            seed: 0,
            weight_decay: 3e-3,
            mmd_bandwidth: BandwidthSpec::Median,
            mmd_max_points: 1024,
            val_fraction: 0.2,
            gen_hidden: 64,
        }
    }
}

impl DnrConfig {
    pub fn validate(&self) -> Result<()> {
        self.heuristic.validate()?;
        if self.heuristic.kind == NoiseKind::Model {
            return Err(Error::Config(
                "warm-up heuristic must be gaussian or beta; model noise only exists after \
                 the generator trains"
                    .into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda_c) {
            return Err(Error::Config(format!("lambda_c must lie in [0, 1], got {}", self.lambda_c)));
        }
        if self.lambda_m < 0.0 {
            return Err(Error::Config(format!("lambda_m must be non-negative, got {}", self.lambda_m)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_theta > 0.0 && self.lr_phi > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.mmd_max_points < 2 {
            return Err(Error::Config("mmd_max_points must be at least 2".into()));
        }
        if self.gen_hidden == 0 {
            return Err(Error::Config("gen_hidden must be positive".into()));
        }
        if let BandwidthSpec::Fixed(h) = self.mmd_bandwidth {
            if !(h > 0.0) {
                return Err(Error::Config(format!("fixed bandwidth must be positive, got {h}")));
            }
        }
        Ok(())
    }
}

// ── phases and history ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// plain supervised training, no corruption term
    Direct,
    /// corruption term active with heuristic noise, generator frozen
    WarmUp,
    /// generator trains against the reranker
    Adversarial,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Direct => "direct",
            Phase::WarmUp => "warmup",
            Phase::Adversarial => "adversarial",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "direct" => Phase::Direct,
            "warmup" => Phase::WarmUp,
            "adversarial" => Phase::Adversarial,
            other => return Err(Error::Data(format!("unknown phase tag `{other}`"))),
        })
    }
}

/// Per-epoch training record. Terms that do not exist in a phase (for
/// example adversarial losses during warm-up) are NaN in the file.
#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub l_direct: f64,
    pub l_z: f64,
    pub l_theta: f64,
    pub l_adv: f64,
    pub l_x: f64,
    pub val_ndcg: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

const HISTORY_HEADER: &str = "epoch,phase,l_direct,l_z,l_theta,l_adv,l_x,val_ndcg";

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{HISTORY_HEADER}")?;
        for r in &self.records {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.phase, r.l_direct, r.l_z, r.l_theta, r.l_adv, r.l_x, r.val_ndcg
            )?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut lines = BufReader::new(f).lines();
        match lines.next() {
            Some(Ok(h)) if h == HISTORY_HEADER => {}
            other => {
                return Err(Error::Data(format!(
                    "bad history header: {other:?}, expected {HISTORY_HEADER}"
                )))
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 8 {
                return Err(Error::Data(format!("history line {}: expected 8 fields", i + 2)));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Data(format!("history line {}: bad number `{s}`", i + 2)))
            };
            records.push(EpochRecord {
                epoch: parts[0]
                    .parse()
                    .map_err(|_| Error::Data(format!("history line {}: bad epoch", i + 2)))?,
                phase: parts[1].parse()?,
                l_direct: num(parts[2])?,
                l_z: num(parts[3])?,
                l_theta: num(parts[4])?,
                l_adv: num(parts[5])?,
                l_x: num(parts[6])?,
                val_ndcg: num(parts[7])?,
            });
        }
        Ok(TrainHistory { records })
    }
}

// ── loss graph builders ──────────────────────────────────────────────────

fn z_as_f64(sample: &RerankSample) -> Vec<f64> {
    sample.z.iter().map(|&z| z as f64).collect()
}

fn batch_label_matrix(batch: &[&RerankSample], n: usize) -> Array2 {
    Array2::from_fn(n, batch.len(), |r, c| batch[c].z[r] as f64)
}

fn batch_predictions<'a>(
    tape: &mut Tape,
    model: &RerankerModel,
    batch: &[&'a RerankSample],
    scores: impl Fn(usize) -> ScoreInputKind<'a>,
    trainable: bool,
) -> Result<NodeId> {
    let mut preds = Vec::with_capacity(batch.len());
    for (j, s) in batch.iter().enumerate() {
        let candidates: Vec<usize> = s.candidates.iter().map(|&i| i as usize).collect();
        let history: Vec<usize> = s.history.iter().map(|&i| i as usize).collect();
        let input = match scores(j) {
            ScoreInputKind::Real => ScoreInput::Values(&s.x),
            ScoreInputKind::Fixed(v) => ScoreInput::Values(v),
        };
        preds.push(model.score_slate(tape, &history, &candidates, input, trainable)?);
    }
    tape.concat_cols(&preds)
}

enum ScoreInputKind<'a> {
    Real,
    Fixed(&'a [f64]),
}

fn check_batch(batch: &[&RerankSample]) -> Result<usize> {
    let n = batch
        .first()
        .ok_or_else(|| Error::Model("loss over an empty batch".into()))?
        .candidates
        .len();
    if batch.iter().any(|s| s.candidates.len() != n) {
        return Err(Error::Model("batch mixes slate sizes".into()));
    }
    Ok(n)
}

/// Mean BCE of the reranker on observed retriever scores.
pub fn build_direct_loss(
    tape: &mut Tape,
    model: &RerankerModel,
    batch: &[&RerankSample],
    trainable: bool,
) -> Result<NodeId> {
    let n = check_batch(batch)?;
    let preds = batch_predictions(tape, model, batch, |_| ScoreInputKind::Real, trainable)?;
    let labels = batch_label_matrix(batch, n);
    let mask = Array2::filled(n, batch.len(), 1.0);
    tape.bce_loss(preds, &labels, &mask)
}

/// Mean BCE of the reranker on pre-computed corrupted scores.
pub fn build_corrupted_loss(
    tape: &mut Tape,
    model: &RerankerModel,
    batch: &[&RerankSample],
    x_prime: &[Vec<f64>],
    trainable: bool,
) -> Result<NodeId> {
    let n = check_batch(batch)?;
    if x_prime.len() != batch.len() {
        return Err(Error::ShapeMismatch {
            op: "build_corrupted_loss",
            left: format!("{} samples", batch.len()),
            right: format!("{} score vectors", x_prime.len()),
        });
    }
    let preds = batch_predictions(
        tape,
        model,
        batch,
        |j| ScoreInputKind::Fixed(&x_prime[j]),
        trainable,
    )?;
    let labels = batch_label_matrix(batch, n);
    let mask = Array2::filled(n, batch.len(), 1.0);
    tape.bce_loss(preds, &labels, &mask)
}

/// Combined reranker loss: direct term plus `lambda_m` times the corrupted
/// term. With `lambda_m` zero the direct node itself is returned, so the
/// two losses agree exactly rather than approximately.
pub fn build_theta_loss(
    tape: &mut Tape,
    model: &RerankerModel,
    batch: &[&RerankSample],
    x_prime: Option<&[Vec<f64>]>,
    lambda_m: f64,
) -> Result<(NodeId, NodeId, Option<NodeId>)> {
    let l_direct = build_direct_loss(tape, model, batch, true)?;
    let l_z = match x_prime {
        Some(xp) => Some(build_corrupted_loss(tape, model, batch, xp, true)?),
        None => None,
    };
    let l_theta = match l_z {
        Some(lz) if lambda_m > 0.0 => {
            let scaled = tape.scale(lz, lambda_m)?;
            tape.add(l_direct, scaled)?
        }
        _ => l_direct,
    };
    Ok((l_theta, l_direct, l_z))
}

/// Reference pool and kernel width for the distribution-matching term.
pub struct MmdRef {
    pub reference: Vec<f64>,
    pub bandwidth: f64,
}

impl MmdRef {
    /// Build from the pooled real scores of the training samples. The pool
    /// is thinned with a deterministic stride before the quadratic sums.
    pub fn from_training_pool(
        samples: &[&RerankSample],
        spec: BandwidthSpec,
        max_points: usize,
    ) -> Result<Self> {
        let pool: Vec<f64> = samples.iter().flat_map(|s| s.x.iter().copied()).collect();
        if pool.is_empty() {
            return Err(Error::Model("mmd reference pool is empty".into()));
        }
        let reference = strided_subset(&pool, max_points);
        let bandwidth = match spec {
            BandwidthSpec::Fixed(h) => h,
            BandwidthSpec::Median => metrics::median_pairwise_distance(&reference),
        };
        Ok(MmdRef { reference, bandwidth })
    }
}

pub(crate) fn strided_subset(values: &[f64], cap: usize) -> Vec<f64> {
    if values.len() <= cap {
        return values.to_vec();
    }
    let step = values.len() as f64 / cap as f64;
    (0..cap).map(|i| values[(i as f64 * step) as usize]).collect()
}

fn strided_indices(len: usize, cap: usize) -> Option<Vec<usize>> {
    if len <= cap {
        return None;
    }
    let step = len as f64 / cap as f64;
    Some((0..cap).map(|i| (i as f64 * step) as usize).collect())
}

/// Generator-phase losses on one batch.
#[derive(Debug)]
pub struct PhiLosses {
    pub total: NodeId,
    pub l_adv: NodeId,
    pub l_x: NodeId,
}

/// Build the generator step: synthesized scores flow through the frozen
/// reranker. `l_adv` is the mean per-slate log-likelihood the reranker
/// assigns to the true labels under corrupted scores (the generator pushes
/// it down); `l_x` is the squared MMD tying synthesized scores to the real
/// score pool. Only legal in the adversarial phase.
pub fn build_phi_losses(
    tape: &mut Tape,
    model: &RerankerModel,
    generator: &GeneratorModel,
    batch: &[&RerankSample],
    uniforms: &[Array2],
    lambda_c: f64,
    mmd: &MmdRef,
    mmd_max_points: usize,
    phase: Phase,
) -> Result<PhiLosses> {
    if phase != Phase::Adversarial {
        return Err(Error::Model("adversarial phase not active".into()));
    }
    let n = check_batch(batch)?;
    if uniforms.len() != batch.len() {
        return Err(Error::ShapeMismatch {
            op: "build_phi_losses",
            left: format!("{} samples", batch.len()),
            right: format!("{} uniform blocks", uniforms.len()),
        });
    }
    let mut x_prime_nodes = Vec::with_capacity(batch.len());
    let mut preds = Vec::with_capacity(batch.len());
    for (j, s) in batch.iter().enumerate() {
        let candidates: Vec<usize> = s.candidates.iter().map(|&i| i as usize).collect();
        let history: Vec<usize> = s.history.iter().map(|&i| i as usize).collect();
        let z = z_as_f64(s);
        let eps = generator.forward(tape, s.user as usize, &candidates, &z, &uniforms[j], true)?;
        let x_prime = synthesize_scores(tape, &z, eps, lambda_c)?;
        x_prime_nodes.push(x_prime);
        preds.push(model.score_slate(
            tape,
            &history,
            &candidates,
            ScoreInput::Node(x_prime),
            false,
        )?);
    }
    let preds = tape.concat_cols(&preds)?;
    let labels = batch_label_matrix(batch, n);
    let mask = Array2::filled(n, batch.len(), 1.0);
    let bce = tape.bce_loss(preds, &labels, &mask)?;
    // mean over slates of the summed cell log-likelihood
    let l_adv = tape.scale(bce, -(n as f64))?;

    let pooled = tape.concat_cols(&x_prime_nodes)?;
    let subset = strided_indices(n * batch.len(), mmd_max_points);
    let l_x = tape.mmd2_rbf(pooled, subset, &mmd.reference, mmd.bandwidth)?;
    let total = tape.add(l_adv, l_x)?;
    Ok(PhiLosses { total, l_adv, l_x })
}

// ── training loop ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// direct loss only; integration must not be `denoise`
    Baseline,
    /// two-phase denoising training; integration must be `denoise`
    Dnr,
}

pub struct TrainOutcome {
    pub model: RerankerModel,
    pub generator: Option<GeneratorModel>,
    pub phi_init_hash: Option<u64>,
    pub phi_final_hash: Option<u64>,
    pub history: TrainHistory,
    /// sample indices held out for validation, in shuffle order
    pub val_indices: Vec<usize>,
}

fn wrap_divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, batch, source: Box::new(e) },
        other => other,
    }
}

/// Train a reranker (and, in DNR mode, its adversary) on fixed samples.
/// The retriever is read-only throughout; `eval_k` is the NDCG cutoff for
/// the per-epoch validation column.
pub fn train(
    mode: TrainMode,
    samples: &[RerankSample],
    retriever: &MfModel,
    rcfg: &RerankerConfig,
    dcfg: &DnrConfig,
    eval_k: usize,
) -> Result<TrainOutcome> {
    rcfg.validate()?;
    dcfg.validate()?;
    match (mode, rcfg.integration) {
        (TrainMode::Baseline, Integration::Denoise) => {
            return Err(Error::Config(
                "denoise integration is only valid for DNR training".into(),
            ))
        }
        (TrainMode::Dnr, i) if i != Integration::Denoise => {
            return Err(Error::Config(format!(
                "DNR training requires the denoise integration, got {i:?}"
            )))
        }
        _ => {}
    }
    if samples.is_empty() {
        return Err(Error::Data("training over an empty sample set".into()));
    }
    let n = samples[0].candidates.len();
    if samples.iter().any(|s| s.candidates.len() != n) {
        return Err(Error::Data("samples disagree on slate size".into()));
    }

    // deterministic split and streams, all tied to the train seed
    let mut shuffle_rng = rng::stream(dcfg.seed, rng::STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut shuffle_rng);
    let val_len = (dcfg.val_fraction * samples.len() as f64).round() as usize;
    let (val_idx, train_idx_base) = order.split_at(val_len);
    let mut train_idx: Vec<usize> = train_idx_base.to_vec();
    if train_idx.is_empty() {
        return Err(Error::Data("validation split leaves no training samples".into()));
    }

    let mut init_rng = rng::stream(dcfg.seed, rng::STREAM_INIT);
    let mut model = RerankerModel::init(*rcfg, retriever.items(), n, &mut init_rng)?;

    let is_dnr = mode == TrainMode::Dnr;
    let mut generator = if is_dnr {
        let mut gen_rng = rng::stream(dcfg.seed, rng::STREAM_GENERATOR_INIT);
        Some(GeneratorModel::init(
            retriever.user_emb.clone(),
            retriever.item_emb.clone(),
            dcfg.heuristic.d_noise,
            dcfg.gen_hidden,
            &mut gen_rng,
        )?)
    } else {
        None
    };
    let phi_init_hash = generator.as_ref().map(|g| g.phi.values_hash());
    let mut noise_rng = rng::stream(dcfg.seed, rng::STREAM_NOISE);

    let mmd = if is_dnr {
        let train_samples: Vec<&RerankSample> = train_idx.iter().map(|&i| &samples[i]).collect();
        Some(MmdRef::from_training_pool(
            &train_samples,
            dcfg.mmd_bandwidth,
            dcfg.mmd_max_points,
        )?)
    } else {
        None
    };

    let theta_adam = AdamConfig {
        lr: dcfg.lr_theta,
        weight_decay: dcfg.weight_decay,
        ..Default::default()
    };
    let phi_adam = AdamConfig { lr: dcfg.lr_phi, ..Default::default() };

    let mut history = TrainHistory::default();
    for epoch in 1..=dcfg.epochs {
        let phase = match mode {
            TrainMode::Baseline => Phase::Direct,
            TrainMode::Dnr if epoch <= dcfg.lambda_e => Phase::WarmUp,
            TrainMode::Dnr => Phase::Adversarial,
        };
        train_idx.shuffle(&mut shuffle_rng);

        let mut sums = [0.0f64; 5]; // l_direct, l_z, l_theta, l_adv, l_x
        let mut theta_batches = 0usize;
        let mut phi_batches = 0usize;

        for (batch_no, chunk) in train_idx.chunks(dcfg.batch_size).enumerate() {
            let batch: Vec<&RerankSample> = chunk.iter().map(|&i| &samples[i]).collect();

            // noise for the corrupted term, drawn detached from any graph
            let (x_prime, uniforms) = if is_dnr {
                let gen = generator.as_ref().expect("generator exists in dnr mode");
                let mut xs = Vec::with_capacity(batch.len());
                let mut us = Vec::with_capacity(batch.len());
                for s in &batch {
                    let z = z_as_f64(s);
                    let eps = match phase {
                        Phase::WarmUp => heuristic_noise(&dcfg.heuristic, n, &mut noise_rng)?,
                        Phase::Adversarial => {
                            let u = gen.draw_uniforms(n, &mut noise_rng);
                            let candidates: Vec<usize> =
                                s.candidates.iter().map(|&i| i as usize).collect();
                            let eps = gen.sample(s.user as usize, &candidates, &z, &u)?;
                            us.push(u);
                            eps
                        }
                        Phase::Direct => unreachable!("baseline never reaches here"),
                    };
                    xs.push(synthesize_scores_values(&z, &eps, dcfg.lambda_c));
                }
                (Some(xs), us)
            } else {
                (None, Vec::new())
            };

            // reranker step
            {
                let mut tape = Tape::new();
                let (l_theta, l_direct, l_z) =
                    build_theta_loss(&mut tape, &model, &batch, x_prime.as_deref(), dcfg.lambda_m)
                        .map_err(|e| wrap_divergence(e, epoch, batch_no))?;
                sums[0] += tape.scalar_value(l_direct)?;
                if let Some(lz) = l_z {
                    sums[1] += tape.scalar_value(lz)?;
                }
                sums[2] += tape.scalar_value(l_theta)?;
                model.theta.zero_grads();
                tape.backward(l_theta, &mut model.theta)
                    .map_err(|e| wrap_divergence(e, epoch, batch_no))?;
                model.theta.adam_step(&theta_adam);
                theta_batches += 1;
            }

            // generator step
            if is_dnr && phase == Phase::Adversarial {
                let gen = generator.as_mut().expect("generator exists in dnr mode");
                let mmd = mmd.as_ref().expect("mmd reference exists in dnr mode");
                let mut tape = Tape::new();
                let losses = build_phi_losses(
                    &mut tape,
                    &model,
                    gen,
                    &batch,
                    &uniforms,
                    dcfg.lambda_c,
                    mmd,
                    dcfg.mmd_max_points,
                    phase,
                )
                .map_err(|e| wrap_divergence(e, epoch, batch_no))?;
                sums[3] += tape.scalar_value(losses.l_adv)?;
                sums[4] += tape.scalar_value(losses.l_x)?;
                gen.phi.zero_grads();
                tape.backward(losses.total, &mut gen.phi)
                    .map_err(|e| wrap_divergence(e, epoch, batch_no))?;
                debug_assert!(
                    model.theta.grads_all_zero(),
                    "reranker gradients must stay zero during the generator step"
                );
                gen.phi.adam_step(&phi_adam);
                phi_batches += 1;
            }
        }

        let val_ndcg = if val_idx.is_empty() {
            f64::NAN
        } else {
            let lists: Result<Vec<(Vec<f64>, Vec<u8>)>> = val_idx
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    let candidates: Vec<usize> =
                        s.candidates.iter().map(|&c| c as usize).collect();
                    let history: Vec<usize> = s.history.iter().map(|&h| h as usize).collect();
                    Ok((model.score_values(&history, &candidates, &s.x)?, s.z.clone()))
                })
                .collect();
            let lists = lists?;
            metrics::evaluate(
                lists.iter().map(|(s, l)| (s.as_slice(), l.as_slice())),
                eval_k,
            )?
            .ndcg
        };

        let tb = theta_batches as f64;
        history.records.push(EpochRecord {
            epoch,
            phase,
            l_direct: sums[0] / tb,
            l_z: if is_dnr { sums[1] / tb } else { f64::NAN },
            l_theta: sums[2] / tb,
            l_adv: if phi_batches > 0 { sums[3] / phi_batches as f64 } else { f64::NAN },
            l_x: if phi_batches > 0 { sums[4] / phi_batches as f64 } else { f64::NAN },
            val_ndcg,
        });
    }

    let phi_final_hash = generator.as_ref().map(|g| g.phi.values_hash());
    Ok(TrainOutcome {
        model,
        generator,
        phi_init_hash,
        phi_final_hash,
        history,
        val_indices: val_idx.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{
        build_rerank_dataset, build_retriever_split, generate_synthetic, ChannelKind,
        NoiseChannel, SyntheticParams,
    };
    use crate::retriever::{train_mf, MfConfig};

    fn tiny_setup() -> (Vec<RerankSample>, MfModel) {
        let (log, _) = generate_synthetic(&SyntheticParams {
            users: 24,
            items: 50,
            latent_dim: 4,
            gain: 2.0,
            channel: NoiseChannel { kind: ChannelKind::None, ..Default::default() },
            density: 1.0,
            exposure: 0.0,
            seed: 42,
        })
        .unwrap();
        let split = build_retriever_split(&log, 0.8).unwrap();
        let retriever = train_mf(
            &split.train,
            log.users,
            log.items,
            &MfConfig { epochs: 2, ..Default::default() },
        )
        .unwrap();
        let samples = build_rerank_dataset(&log, &split, &retriever, 8, 4, 6).unwrap();
        (samples, retriever)
    }

    fn tiny_model(retriever: &MfModel, integration: Integration, n: usize) -> RerankerModel {
        let mut r = rng::stream(1, rng::STREAM_INIT);
        RerankerModel::init(
            RerankerConfig { integration, hidden: 8, ..Default::default() },
            retriever.items(),
            n,
            &mut r,
        )
        .unwrap()
    }

    #[test]
    fn direct_loss_matches_cellwise_recompute() {
        let (samples, retriever) = tiny_setup();
        let model = tiny_model(&retriever, Integration::Concat, 8);
        let batch: Vec<&RerankSample> = samples.iter().take(3).collect();
        let mut tape = Tape::new();
        let node = build_direct_loss(&mut tape, &model, &batch, false).unwrap();
        let got = tape.scalar_value(node).unwrap();

        let mut acc = 0.0;
        let mut cells = 0;
        for s in &batch {
            let candidates: Vec<usize> = s.candidates.iter().map(|&i| i as usize).collect();
            let history: Vec<usize> = s.history.iter().map(|&i| i as usize).collect();
            let p = model.score_values(&history, &candidates, &s.x).unwrap();
            for (j, &z) in s.z.iter().enumerate() {
                let ph = p[j].clamp(1e-7, 1.0 - 1e-7);
                acc -= if z > 0 { ph.ln() } else { (1.0 - ph).ln() };
                cells += 1;
            }
        }
        let expect = acc / cells as f64;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn theta_loss_identities() {
        let (samples, retriever) = tiny_setup();
        let model = tiny_model(&retriever, Integration::Denoise, 8);
        let batch: Vec<&RerankSample> = samples.iter().take(4).collect();
        let mut noise_rng = rng::stream(9, rng::STREAM_NOISE);
        let x_prime: Vec<Vec<f64>> = batch
            .iter()
            .map(|s| {
                let z = z_as_f64(s);
                let eps = heuristic_noise(&NoiseSpec::default(), 8, &mut noise_rng).unwrap();
                synthesize_scores_values(&z, &eps, 0.4)
            })
            .collect();

        let mut tape = Tape::new();
        let (lt, ld, lz) =
            build_theta_loss(&mut tape, &model, &batch, Some(&x_prime), 0.7).unwrap();
        let (lt, ld, lz) = (
            tape.scalar_value(lt).unwrap(),
            tape.scalar_value(ld).unwrap(),
            tape.scalar_value(lz.unwrap()).unwrap(),
        );
        assert!((lt - (ld + 0.7 * lz)).abs() < 1e-12);

        // lambda_m = 0 collapses to the direct loss exactly
        let mut tape = Tape::new();
        let (lt0, ld0, _) = build_theta_loss(&mut tape, &model, &batch, Some(&x_prime), 0.0).unwrap();
        assert_eq!(tape.scalar_value(lt0).unwrap(), tape.scalar_value(ld0).unwrap());
    }

    #[test]
    fn phi_losses_require_adversarial_phase() {
        let (samples, retriever) = tiny_setup();
        let model = tiny_model(&retriever, Integration::Denoise, 8);
        let mut gen_rng = rng::stream(1, rng::STREAM_GENERATOR_INIT);
        let gen = GeneratorModel::init(
            retriever.user_emb.clone(),
            retriever.item_emb.clone(),
            8,
            16,
            &mut gen_rng,
        )
        .unwrap();
        let batch: Vec<&RerankSample> = samples.iter().take(2).collect();
        let mut noise_rng = rng::stream(2, rng::STREAM_NOISE);
        let uniforms: Vec<Array2> =
            batch.iter().map(|_| gen.draw_uniforms(8, &mut noise_rng)).collect();
        let mmd = MmdRef { reference: vec![0.2, 0.5, 0.8], bandwidth: 0.5 };
        let mut tape = Tape::new();
        let err = build_phi_losses(
            &mut tape, &model, &gen, &batch, &uniforms, 0.4, &mmd, 64, Phase::WarmUp,
        )
        .unwrap_err();
        assert!(err.to_string().contains("adversarial phase not active"), "{err}");
        assert!(build_phi_losses(
            &mut tape, &model, &gen, &batch, &uniforms, 0.4, &mmd, 64, Phase::Adversarial,
        )
        .is_ok());
    }

    #[test]
    fn mode_and_integration_must_agree() {
        let (samples, retriever) = tiny_setup();
        let dcfg = DnrConfig { epochs: 1, ..Default::default() };
        let base_cfg = RerankerConfig { integration: Integration::Denoise, hidden: 8, ..Default::default() };
        assert!(train(TrainMode::Baseline, &samples, &retriever, &base_cfg, &dcfg, 4).is_err());
        let dnr_cfg = RerankerConfig { integration: Integration::Concat, hidden: 8, ..Default::default() };
        assert!(train(TrainMode::Dnr, &samples, &retriever, &dnr_cfg, &dcfg, 4).is_err());
    }

    #[test]
    fn phases_flip_at_lambda_e_and_history_roundtrips() {
        let (samples, retriever) = tiny_setup();
        let rcfg = RerankerConfig { integration: Integration::Denoise, hidden: 8, ..Default::default() };
        let dcfg = DnrConfig {
            epochs: 4,
            lambda_e: 2,
            batch_size: 8,
            mmd_max_points: 128,
            ..Default::default()
        };
        let out = train(TrainMode::Dnr, &samples, &retriever, &rcfg, &dcfg, 4).unwrap();
        let phases: Vec<Phase> = out.history.records.iter().map(|r| r.phase).collect();
        assert_eq!(
            phases,
            vec![Phase::WarmUp, Phase::WarmUp, Phase::Adversarial, Phase::Adversarial]
        );
        // warm-up rows have no adversarial terms; adversarial rows do
        assert!(out.history.records[0].l_adv.is_nan());
        assert!(out.history.records[3].l_adv.is_finite());
        assert!(out.history.records[3].l_x.is_finite());
        // generator actually moved
        assert_ne!(out.phi_init_hash, out.phi_final_hash);

        let dir = std::env::temp_dir().join("dnr_core_history_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("history.csv");
        out.history.write_csv(&path).unwrap();
        let back = TrainHistory::load_csv(&path).unwrap();
        assert_eq!(back.records.len(), 4);
        assert!(back.records[0].l_adv.is_nan());
        assert_eq!(back.records[3].phase, Phase::Adversarial);
        assert!((back.records[3].l_direct - out.history.records[3].l_direct).abs() < 1e-15);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn generator_untouched_when_warmup_covers_all_epochs() {
        let (samples, retriever) = tiny_setup();
        let rcfg = RerankerConfig { integration: Integration::Denoise, hidden: 8, ..Default::default() };
        let dcfg = DnrConfig { epochs: 3, lambda_e: 3, batch_size: 8, ..Default::default() };
        let out = train(TrainMode::Dnr, &samples, &retriever, &rcfg, &dcfg, 4).unwrap();
        assert_eq!(out.phi_init_hash, out.phi_final_hash);
        assert!(out.history.records.iter().all(|r| r.phase == Phase::WarmUp));
    }

    #[test]
    fn bandwidth_spec_serde() {
        let m: BandwidthSpec = serde_json::from_str("\"median\"").unwrap();
        assert_eq!(m, BandwidthSpec::Median);
        let f: BandwidthSpec = serde_json::from_str("0.25").unwrap();
        assert_eq!(f, BandwidthSpec::Fixed(0.25));
        assert!(serde_json::from_str::<BandwidthSpec>("\"mean\"").is_err());
        assert!(serde_json::from_str::<BandwidthSpec>("-1.0").is_err());
        assert_eq!(serde_json::to_string(&BandwidthSpec::Median).unwrap(), "\"median\"");
    }

    #[test]
    fn strided_subset_caps_and_spans() {
        let vals: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let sub = strided_subset(&vals, 10);
        assert_eq!(sub.len(), 10);
        assert_eq!(sub[0], 0.0);
        assert!(sub[9] >= 90.0);
        assert_eq!(strided_subset(&vals, 200).len(), 100);
    }
}
