//! Experiment drivers shared by the command-line binary and the
//! integration suite: dataset assembly, training runs, evaluation,
//! sweeps, and noise diagnostics. Every driver is a deterministic
//! function of its config, so reruns rewrite identical bytes.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::datagen::{
    build_rerank_dataset, build_retriever_split, filter_min_interactions, generate_synthetic,
    load_csv, load_samples, save_samples, write_csv, InteractionLog, RerankSample,
    SyntheticTruth,
};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, NoiseDiag};
use crate::noise::{heuristic_noise, GeneratorModel, NoiseKind, NoiseSpec};
use crate::objectives::{self, TrainMode};
use crate::reranker::RerankerModel;
use crate::retriever::{evaluate_auc, train_mf, MfModel};
use crate::rng;

pub const LOG_FILE: &str = "log.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const RETRIEVER_FILE: &str = "retriever.ckpt";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const DATA_SUMMARY_FILE: &str = "data_summary.json";
pub const CONFIG_COPY_FILE: &str = "config.json";
pub const GENERATOR_FILE: &str = "dnr_generator.ckpt";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const NOISE_DIAG_FILE: &str = "noise_diag.json";
pub const NOISE_HIST_FILE: &str = "noise_hist.csv";

pub fn mode_prefix(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Baseline => "baseline",
        TrainMode::Dnr => "dnr",
    }
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    Path::new(&cfg.output_dir).join(name)
}

/// Resolve an artifact that an earlier stage must have produced.
fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingPrereq(path.display().to_string()))
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

// ── dataset assembly ─────────────────────────────────────────────────────

/// Everything the experiment needs, held in memory. Sweep cells use this
/// directly; `gen_data` persists it to the output directory.
pub struct Assembled {
    pub log: InteractionLog,
    pub truth: Option<SyntheticTruth>,
    pub retriever: MfModel,
    pub retriever_auc: Option<f64>,
    pub samples: Vec<RerankSample>,
}

pub fn assemble(cfg: &ExperimentConfig) -> Result<Assembled> {
    cfg.validate()?;
    let (raw, truth) = match &cfg.data.csv_path {
        Some(p) => (load_csv(&require(PathBuf::from(p))?)?, None),
        None => {
            let (log, t) = generate_synthetic(&cfg.data.synthetic)?;
            (log, Some(t))
        }
    };
    let log = filter_min_interactions(&raw, cfg.data.min_interactions)?;
    // truth records one noise draw per emitted event; it only stays usable
    // if filtering left the event list untouched
    let truth = match truth {
        Some(t) if log.events.len() == raw.events.len() => Some(t),
        Some(_) => {
            log::warn!(
                "min-interaction filter dropped events; the synthetic truth \
                 sidecar is no longer aligned and will be skipped"
            );
            None
        }
        None => None,
    };
    let split = build_retriever_split(&log, cfg.data.split_ratio)?;
    let retriever = train_mf(&split.train, log.users, log.items, &cfg.retriever)?;
    let retriever_auc = evaluate_auc(&retriever, &log, &split.test, cfg.retriever.seed);
    let samples = build_rerank_dataset(
        &log,
        &split,
        &retriever,
        cfg.data.n,
        cfg.data.k,
        cfg.data.history_len,
    )?;
    Ok(Assembled { log, truth, retriever, retriever_auc, samples })
}

#[derive(Debug, Clone, Serialize)]
pub struct DataStats {
    pub users: usize,
    pub items: usize,
    pub actions: usize,
    pub positives: usize,
    pub sequences: usize,
    pub flagged_no_positive: usize,
    pub retriever_auc: Option<f64>,
    pub has_truth: bool,
}

impl DataStats {
    /// Aligned two-column listing for terminal output.
    pub fn table(&self) -> String {
        let mut rows: Vec<(&str, String)> = vec![
            ("#users", self.users.to_string()),
            ("#items", self.items.to_string()),
            ("#actions", self.actions.to_string()),
            ("#positives", self.positives.to_string()),
            ("#sequences", self.sequences.to_string()),
            ("#zero-positive sequences", self.flagged_no_positive.to_string()),
        ];
        if let Some(auc) = self.retriever_auc {
            rows.push(("retriever AUC", format!("{auc:.4}")));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Build the dataset and persist every artifact downstream stages read:
/// the interaction log, the truth sidecar (synthetic worlds only), the
/// trained retriever, and the reranking samples.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<DataStats> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let a = assemble(cfg)?;
    write_csv(&a.log, &out_path(cfg, LOG_FILE))?;
    if let Some(t) = &a.truth {
        t.save(&out_path(cfg, TRUTH_FILE))?;
    }
    a.retriever.save(&out_path(cfg, RETRIEVER_FILE))?;
    save_samples(&a.samples, &out_path(cfg, SAMPLES_FILE))?;
    let stats = DataStats {
        users: a.log.users,
        items: a.log.items,
        actions: a.log.events.len(),
        positives: a.log.events.iter().filter(|e| e.label > 0).count(),
        sequences: a.samples.len(),
        flagged_no_positive: a.samples.iter().filter(|s| !s.has_positive()).count(),
        retriever_auc: a.retriever_auc,
        has_truth: a.truth.is_some(),
    };
    write_json(&stats, &out_path(cfg, DATA_SUMMARY_FILE))?;
    cfg.save(&out_path(cfg, CONFIG_COPY_FILE))?;
    Ok(stats)
}

// ── training drivers ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct RetrieverSummary {
    pub users: usize,
    pub items: usize,
    pub auc: Option<f64>,
    pub checkpoint_hash: u64,
    pub sequences: usize,
}

/// Retrain the retriever from the persisted log and refresh every
/// artifact derived from it (checkpoint and reranking samples).
pub fn train_retriever(cfg: &ExperimentConfig) -> Result<RetrieverSummary> {
    let log = load_csv(&require(out_path(cfg, LOG_FILE))?)?;
    let log = filter_min_interactions(&log, cfg.data.min_interactions)?;
    let split = build_retriever_split(&log, cfg.data.split_ratio)?;
    let retriever = train_mf(&split.train, log.users, log.items, &cfg.retriever)?;
    let auc = evaluate_auc(&retriever, &log, &split.test, cfg.retriever.seed);
    retriever.save(&out_path(cfg, RETRIEVER_FILE))?;
    let samples = build_rerank_dataset(
        &log,
        &split,
        &retriever,
        cfg.data.n,
        cfg.data.k,
        cfg.data.history_len,
    )?;
    save_samples(&samples, &out_path(cfg, SAMPLES_FILE))?;
    let summary = RetrieverSummary {
        users: log.users,
        items: log.items,
        auc,
        checkpoint_hash: retriever.checkpoint_hash(),
        sequences: samples.len(),
    };
    write_json(&summary, &out_path(cfg, "retriever_summary.json"))?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub mode: String,
    pub epochs: usize,
    pub theta_hash: u64,
    pub phi_init_hash: Option<u64>,
    pub phi_final_hash: Option<u64>,
    /// full metrics on the held-out validation samples under the final model
    pub final_val: Option<MetricsReport>,
}

fn score_lists<'a, I>(model: &RerankerModel, samples: I) -> Result<Vec<(Vec<f64>, Vec<u8>)>>
where
    I: IntoIterator<Item = &'a RerankSample>,
{
    samples
        .into_iter()
        .map(|s| {
            let history: Vec<usize> = s.history.iter().map(|&h| h as usize).collect();
            let candidates: Vec<usize> = s.candidates.iter().map(|&c| c as usize).collect();
            Ok((model.score_values(&history, &candidates, &s.x)?, s.z.clone()))
        })
        .collect()
}

/// Train a reranker against the persisted dataset and retriever. Writes
/// the model checkpoint, the per-epoch history CSV, the summary JSON,
/// and (DNR mode) the trained noise generator.
pub fn train_reranker(cfg: &ExperimentConfig, mode: TrainMode) -> Result<TrainSummary> {
    let samples = load_samples(&require(out_path(cfg, SAMPLES_FILE))?)?;
    let retriever = MfModel::load(&require(out_path(cfg, RETRIEVER_FILE))?)?;
    let outcome = objectives::train(
        mode,
        &samples,
        &retriever,
        &cfg.reranker,
        &cfg.dnr,
        cfg.data.k,
    )?;
    let prefix = mode_prefix(mode);
    outcome.model.save(&out_path(cfg, &format!("{prefix}_reranker.ckpt")))?;
    outcome.history.write_csv(&out_path(cfg, &format!("{prefix}_history.csv")))?;
    if let Some(gen) = &outcome.generator {
        gen.save(&out_path(cfg, GENERATOR_FILE))?;
    }
    let final_val = if outcome.val_indices.is_empty() {
        None
    } else {
        let lists = score_lists(&outcome.model, outcome.val_indices.iter().map(|&i| &samples[i]))?;
        Some(metrics::evaluate(
            lists.iter().map(|(s, l)| (s.as_slice(), l.as_slice())),
            cfg.data.k,
        )?)
    };
    let summary = TrainSummary {
        mode: prefix.to_string(),
        epochs: cfg.dnr.epochs,
        theta_hash: outcome.model.checkpoint_hash(),
        phi_init_hash: outcome.phi_init_hash,
        phi_final_hash: outcome.phi_final_hash,
        final_val,
    };
    write_json(&summary, &out_path(cfg, &format!("{prefix}_summary.json")))?;
    Ok(summary)
}

// ── evaluation ───────────────────────────────────────────────────────────

/// Score the persisted samples with a reranker checkpoint, or with the
/// identity model (retriever scores pass through) when none is given.
/// Writes `eval_<name>.json` and optionally a per-sample metric CSV.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    dump_per_sample: bool,
) -> Result<MetricsReport> {
    let samples = load_samples(&require(out_path(cfg, SAMPLES_FILE))?)?;
    let n = samples[0].candidates.len();
    let k = cfg.data.k;
    if k > n {
        return Err(Error::Config(format!("K = {k} exceeds the slate size {n}")));
    }
    let (name, lists): (String, Vec<(Vec<f64>, Vec<u8>)>) = match checkpoint {
        Some(path) => {
            let model = RerankerModel::load(&require(path.to_path_buf())?)?;
            if model.slate_len != n {
                return Err(Error::Config(format!(
                    "checkpoint was trained on slates of {} but the dataset has {n}",
                    model.slate_len
                )));
            }
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("checkpoint")
                .to_string();
            (name, score_lists(&model, &samples)?)
        }
        None => (
            "identity".to_string(),
            samples.iter().map(|s| (s.x.clone(), s.z.clone())).collect(),
        ),
    };
    let report = metrics::evaluate(
        lists.iter().map(|(s, l)| (s.as_slice(), l.as_slice())),
        k,
    )?;
    write_json(&report, &out_path(cfg, &format!("eval_{name}.json")))?;
    if dump_per_sample {
        let mut out = String::from("user,flagged,hr,ndcg,map,precision,recall,f1,auc\n");
        for (sample, (scores, labels)) in samples.iter().zip(&lists) {
            let ranked = metrics::ranked_labels(scores, labels)?;
            let auc = metrics::auc(scores, labels)
                .map(|a| a.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                sample.user,
                u8::from(!sample.has_positive()),
                metrics::hr_at_k(&ranked, k),
                metrics::ndcg_at_k(&ranked, k),
                metrics::map_at_k(&ranked, k),
                metrics::precision_at_k(&ranked, k),
                metrics::recall_at_k(&ranked, k),
                metrics::f1_at_k(&ranked, k),
                auc,
            ));
        }
        std::fs::write(out_path(cfg, &format!("eval_{name}_per_sample.csv")), out)?;
    }
    Ok(report)
}

// ── hyperparameter sweep ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    LambdaC,
    LambdaM,
    LambdaE,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::LambdaC => "lambda_c",
            SweepAxis::LambdaM => "lambda_m",
            SweepAxis::LambdaE => "lambda_e",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda_c" => Ok(SweepAxis::LambdaC),
            "lambda_m" => Ok(SweepAxis::LambdaM),
            "lambda_e" => Ok(SweepAxis::LambdaE),
            other => Err(Error::Config(format!(
                "unknown sweep axis `{other}` (expected lambda_c, lambda_m, or lambda_e)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: f64,
    pub seed: u64,
    pub val_ndcg: f64,
}

fn check_sweep_values(axis: SweepAxis, values: &[f64], epochs: usize) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    for &v in values {
        let ok = match axis {
            SweepAxis::LambdaC | SweepAxis::LambdaM => (0.1..=1.0).contains(&v),
            SweepAxis::LambdaE => v.fract() == 0.0 && v >= 0.0 && v <= epochs as f64,
        };
        if !ok {
            return Err(Error::Config(format!(
                "sweep value {v} outside the searched region for {}",
                axis.name()
            )));
        }
    }
    Ok(())
}

fn cell_config(cfg: &ExperimentConfig, axis: SweepAxis, value: f64, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::LambdaC => c.dnr.lambda_c = value,
        SweepAxis::LambdaM => c.dnr.lambda_m = value,
        SweepAxis::LambdaE => c.dnr.lambda_e = value as usize,
    }
    // one seed drives the whole cell so cells pair across axis values
    c.data.synthetic.seed = seed;
    c.retriever.seed = seed;
    c.dnr.seed = seed;
    c
}

fn run_cell(cfg: &ExperimentConfig) -> Result<f64> {
    let a = assemble(cfg)?;
    let outcome = objectives::train(
        TrainMode::Dnr,
        &a.samples,
        &a.retriever,
        &cfg.reranker,
        &cfg.dnr,
        cfg.data.k,
    )?;
    let last = outcome
        .history
        .records
        .last()
        .ok_or_else(|| Error::Model("training produced no epochs".into()))?;
    Ok(last.val_ndcg)
}

/// Train one DNR run per (value, seed) cell, each regenerating its world
/// from the cell seed, and collect final validation NDCG. Cells run on up
/// to `threads` worker threads; 0 means use the machine's parallelism.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    check_sweep_values(axis, values, cfg.dnr.epochs)?;
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let cells: Vec<(usize, f64, u64)> = values
        .iter()
        .enumerate()
        .flat_map(|(vi, &v)| {
            seeds.iter().enumerate().map(move |(si, &s)| (vi * seeds.len() + si, v, s))
        })
        .collect();
    let workers = if threads == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        threads
    }
    .min(cells.len())
    .max(1);

    let mut rows: Vec<Option<SweepRow>> = vec![None; cells.len()];
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for chunk in cells.chunks(cells.len().div_ceil(workers)) {
            let cfg = &cfg;
            handles.push(scope.spawn(move || -> Result<Vec<(usize, SweepRow)>> {
                let mut out = Vec::with_capacity(chunk.len());
                for &(idx, value, seed) in chunk {
                    let cell = cell_config(cfg, axis, value, seed);
                    let val_ndcg = run_cell(&cell)?;
                    log::info!("sweep cell {}={value} seed={seed}: ndcg {val_ndcg:.4}", axis.name());
                    out.push((idx, SweepRow { axis: axis.name(), value, seed, val_ndcg }));
                }
                Ok(out)
            }));
        }
        for h in handles {
            let batch = h.join().map_err(|_| Error::Model("sweep worker panicked".into()))?;
            for (idx, row) in batch? {
                rows[idx] = Some(row);
            }
        }
        Ok(())
    })?;
    let rows: Vec<SweepRow> = rows
        .into_iter()
        .map(|r| r.expect("every cell filled"))
        .collect();

    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut csv = String::from("axis,value,seed,val_ndcg\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.axis, r.value, r.seed, r.val_ndcg));
    }
    std::fs::write(out_path(cfg, SWEEP_FILE), csv)?;
    Ok(rows)
}

// ── noise diagnostics ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct NoiseDiagBundle {
    pub bins: usize,
    pub pool_size: usize,
    /// trained generator output against the recorded true noise
    pub model: NoiseDiag,
    /// warm-up style heuristics against the same reference
    pub gaussian: NoiseDiag,
    pub beta: NoiseDiag,
}

/// Compare the trained generator's noise distribution against the
/// synthetic world's recorded noise, alongside both warm-up heuristics.
/// Needs the truth sidecar, the samples, and a trained DNR generator.
pub fn noise_diag(cfg: &ExperimentConfig, bins: usize) -> Result<NoiseDiagBundle> {
    let truth = SyntheticTruth::load(&require(out_path(cfg, TRUTH_FILE))?)?;
    let samples = load_samples(&require(out_path(cfg, SAMPLES_FILE))?)?;
    let generator = GeneratorModel::load(&require(out_path(cfg, GENERATOR_FILE))?)?;
    let reference = &truth.noise;

    let mut rng = rng::stream(cfg.dnr.seed, rng::STREAM_EVAL);
    let mut model_pool = Vec::new();
    for s in &samples {
        let z: Vec<f64> = s.z.iter().map(|&v| v as f64).collect();
        let candidates: Vec<usize> = s.candidates.iter().map(|&c| c as usize).collect();
        let uniforms = generator.draw_uniforms(candidates.len(), &mut rng);
        model_pool.extend(generator.sample(s.user as usize, &candidates, &z, &uniforms)?);
    }
    let count = model_pool.len();
    let gaussian_pool = heuristic_noise(
        &NoiseSpec { kind: NoiseKind::Gaussian, ..cfg.dnr.heuristic },
        count,
        &mut rng,
    )?;
    let beta_pool = heuristic_noise(
        &NoiseSpec { kind: NoiseKind::Beta, ..cfg.dnr.heuristic },
        count,
        &mut rng,
    )?;

    let bundle = NoiseDiagBundle {
        bins,
        pool_size: count,
        model: metrics::noise_diagnostics(reference, &model_pool, bins)?,
        gaussian: metrics::noise_diagnostics(reference, &gaussian_pool, bins)?,
        beta: metrics::noise_diagnostics(reference, &beta_pool, bins)?,
    };
    write_json(&bundle, &out_path(cfg, NOISE_DIAG_FILE))?;

    let mut csv = String::from("bin,reference,model,gaussian,beta\n");
    for b in 0..bins {
        csv.push_str(&format!(
            "{b},{},{},{},{}\n",
            bundle.model.reference_hist[b],
            bundle.model.candidate_hist[b],
            bundle.gaussian.candidate_hist[b],
            bundle.beta.candidate_hist[b],
        ));
    }
    std::fs::write(out_path(cfg, NOISE_HIST_FILE), csv)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_axis_parses() {
        assert_eq!("lambda_c".parse::<SweepAxis>().unwrap(), SweepAxis::LambdaC);
        assert_eq!("lambda_e".parse::<SweepAxis>().unwrap(), SweepAxis::LambdaE);
        assert!("lambda_q".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn sweep_value_grid_enforced() {
        assert!(check_sweep_values(SweepAxis::LambdaC, &[0.1, 1.0], 10).is_ok());
        assert!(check_sweep_values(SweepAxis::LambdaC, &[0.05], 10).is_err());
        assert!(check_sweep_values(SweepAxis::LambdaC, &[], 10).is_err());
        assert!(check_sweep_values(SweepAxis::LambdaE, &[0.0, 10.0], 10).is_ok());
        assert!(check_sweep_values(SweepAxis::LambdaE, &[2.5], 10).is_err());
        assert!(check_sweep_values(SweepAxis::LambdaE, &[11.0], 10).is_err());
    }

    #[test]
    fn missing_artifact_is_a_prereq_error() {
        let mut cfg = ExperimentConfig::default();
        cfg.output_dir = std::env::temp_dir()
            .join("dnr_missing_artifacts")
            .to_string_lossy()
            .into_owned();
        match train_reranker(&cfg, TrainMode::Baseline) {
            Err(Error::MissingPrereq(path)) => assert!(path.contains(SAMPLES_FILE)),
            other => panic!("expected a missing-prerequisite error, got {other:?}"),
        }
    }

    #[test]
    fn stats_table_lists_all_rows() {
        let stats = DataStats {
            users: 10,
            items: 20,
            actions: 200,
            positives: 90,
            sequences: 10,
            flagged_no_positive: 2,
            retriever_auc: Some(0.71),
            has_truth: true,
        };
        let table = stats.table();
        for key in ["#users", "#items", "#actions", "#sequences", "retriever AUC"] {
            assert!(table.contains(key), "missing {key} in:\n{table}");
        }
    }
}
