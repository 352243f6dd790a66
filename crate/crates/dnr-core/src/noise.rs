//! Noise sources for score corruption: closed-form heuristics (clamped
//! Gaussian, Beta) and a small learned generator MLP conditioned on labels
//! and retriever embeddings.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array2;
use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Beta,
    Model,
}

/// Declarative description of a noise source. `mu`/`sigma` apply to the
/// Gaussian kind, `alpha`/`beta` to the Beta kind, `d_noise` to the learned
/// model; `lambda_c` is the corruption mix used when synthesizing scores.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub mu: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub d_noise: usize,
    pub lambda_c: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            kind: NoiseKind::Gaussian,
            mu: 0.5,
            sigma: 0.25,
            alpha: 0.5,
            beta: 0.5,
            d_noise: 8,
            lambda_c: 0.4,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("noise sigma must be positive, got {}", self.sigma)));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "beta shapes must be positive, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_c) {
            return Err(Error::Config(format!(
                "lambda_c must lie in [0, 1], got {}",
                self.lambda_c
            )));
        }
        if self.d_noise == 0 {
            return Err(Error::Config("d_noise must be at least 1".into()));
        }
        Ok(())
    }
}

// ── closed-form samplers ─────────────────────────────────────────────────

/// One standard normal via Box-Muller. Consumes two uniforms and discards
/// the second variate; sampling stays deterministic per RNG state either way.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1], keeps the log finite
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Gaussian draws before the unit-interval clamp. Exposed so distribution
/// tests can look at the raw variates.
pub fn sample_gaussian_unclamped(n: usize, mu: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| mu + sigma * standard_normal(rng)).collect()
}

/// Gaussian noise clamped into [0, 1].
pub fn sample_gaussian(n: usize, mu: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    sample_gaussian_unclamped(n, mu, sigma, rng)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect()
}

/// Gamma(shape, 1) via the Marsaglia-Tsang squeeze. Shapes below one use
/// the boosting identity G(a) = G(a+1) * U^(1/a).
fn sample_gamma(shape: f64, rng: &mut ChaCha8Rng) -> f64 {
    if shape < 1.0 {
        let u: f64 = 1.0 - rng.random::<f64>();
        return sample_gamma(shape + 1.0, rng) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = standard_normal(rng);
        let v = (1.0 + c * x).powi(3);
        if v <= 0.0 {
            continue;
        }
        let u: f64 = rng.random();
        if u < 1.0 - 0.0331 * x.powi(4) {
            return d * v;
        }
        if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Beta draws as a ratio of two Gamma variates, nudged off the endpoints.
pub fn sample_beta(n: usize, alpha: f64, beta: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let ga = sample_gamma(alpha, rng);
            let gb = sample_gamma(beta, rng);
            let sum = ga + gb;
            let v = if sum > 0.0 { ga / sum } else { 0.5 };
            v.clamp(1e-12, 1.0 - 1e-12)
        })
        .collect()
}

/// Draw heuristic noise per the spec'd kind. The model kind has no
/// closed form; callers must go through a trained generator instead.
pub fn heuristic_noise(spec: &NoiseSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    match spec.kind {
        NoiseKind::Gaussian => Ok(sample_gaussian(n, spec.mu, spec.sigma, rng)),
        NoiseKind::Beta => Ok(sample_beta(n, spec.alpha, spec.beta, rng)),
        NoiseKind::Model => Err(Error::Model(
            "model noise requires a trained generator; heuristic kinds are gaussian or beta".into(),
        )),
    }
}

// ── score synthesis ──────────────────────────────────────────────────────

/// Corrupted scores as a graph node: x' = lambda_c * eps + (1 - lambda_c) * z.
pub fn synthesize_scores(
    tape: &mut Tape,
    z: &[f64],
    eps: NodeId,
    lambda_c: f64,
) -> Result<NodeId> {
    let shape = tape.value(eps).shape();
    if shape != (z.len(), 1) {
        return Err(Error::ShapeMismatch {
            op: "synthesize_scores",
            left: Error::shape_str(shape),
            right: format!("{}x1", z.len()),
        });
    }
    let scaled_eps = tape.scale(eps, lambda_c)?;
    let kept: Vec<f64> = z.iter().map(|&zi| (1.0 - lambda_c) * zi).collect();
    let kept = tape.constant(Array2::col_vec(&kept))?;
    tape.add(scaled_eps, kept)
}

/// Same recombination on plain values, term-for-term identical to the graph
/// route so the two agree bitwise.
pub fn synthesize_scores_values(z: &[f64], eps: &[f64], lambda_c: f64) -> Vec<f64> {
    assert_eq!(z.len(), eps.len(), "synthesize_scores_values length mismatch");
    z.iter()
        .zip(eps)
        .map(|(&zi, &ei)| lambda_c * ei + (1.0 - lambda_c) * zi)
        .collect()
}

// ── learned generator ────────────────────────────────────────────────────

/// Two-layer MLP producing per-candidate noise in (0, 1). Inputs per
/// candidate: its relevance label, the (frozen) retriever user and item
/// embeddings, and `d_noise` fresh uniform draws that give the generator an
/// exogenous randomness source.
pub struct GeneratorModel {
    pub phi: ParamStore,
    pub user_emb: Array2,
    pub item_emb: Array2,
    pub d_noise: usize,
    pub hidden: usize,
}

pub const GEN_W1: &str = "gen_w1";
pub const GEN_B1: &str = "gen_b1";
pub const GEN_W2: &str = "gen_w2";
pub const GEN_B2: &str = "gen_b2";

impl GeneratorModel {
    /// Fresh generator around frozen retriever embeddings. Weights start
    /// small so the initial output sits near 0.5 everywhere.
    pub fn init(
        user_emb: Array2,
        item_emb: Array2,
        d_noise: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if user_emb.cols() != item_emb.cols() {
            return Err(Error::ShapeMismatch {
                op: "generator_init",
                left: Error::shape_str(user_emb.shape()),
                right: Error::shape_str(item_emb.shape()),
            });
        }
        let d = user_emb.cols();
        let input_dim = 1 + 2 * d + d_noise;
        let mut phi = ParamStore::new();
        let mut uniform = |rows: usize, cols: usize, scale: f64| {
            Array2::from_fn(rows, cols, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * scale)
        };
        phi.insert(GEN_W1, uniform(input_dim, hidden, 0.05))?;
        phi.insert(GEN_B1, Array2::zeros(1, hidden))?;
        phi.insert(GEN_W2, uniform(hidden, 1, 0.05))?;
        phi.insert(GEN_B2, Array2::zeros(1, 1))?;
        Ok(GeneratorModel { phi, user_emb, item_emb, d_noise, hidden })
    }

    /// Uniform exogenous draws for one sample, row per candidate.
    pub fn draw_uniforms(&self, n: usize, rng: &mut ChaCha8Rng) -> Array2 {
        Array2::from_fn(n, self.d_noise, |_, _| rng.random())
    }

    /// Build the generator forward pass on a tape. With `trainable` the MLP
    /// weights enter as parameters (gradients flow to phi); otherwise they
    /// are baked in as constants. Output is an n x 1 node in (0, 1).
    pub fn forward(
        &self,
        tape: &mut Tape,
        user: usize,
        candidates: &[usize],
        z: &[f64],
        uniforms: &Array2,
        trainable: bool,
    ) -> Result<NodeId> {
        let n = candidates.len();
        if z.len() != n {
            return Err(Error::ShapeMismatch {
                op: "generator_forward",
                left: format!("{n} candidates"),
                right: format!("{} labels", z.len()),
            });
        }
        if uniforms.shape() != (n, self.d_noise) {
            return Err(Error::ShapeMismatch {
                op: "generator_forward",
                left: Error::shape_str(uniforms.shape()),
                right: Error::shape_str((n, self.d_noise)),
            });
        }
        if user >= self.user_emb.rows() {
            return Err(Error::Model(format!(
                "generator_forward: user {user} out of range for {} embeddings",
                self.user_emb.rows()
            )));
        }
        if let Some(&bad) = candidates.iter().find(|&&c| c >= self.item_emb.rows()) {
            return Err(Error::Model(format!(
                "generator_forward: item {bad} out of range for {} embeddings",
                self.item_emb.rows()
            )));
        }

        let d = self.user_emb.cols();
        let input = Array2::from_fn(n, 1 + 2 * d + self.d_noise, |r, c| {
            if c == 0 {
                z[r]
            } else if c < 1 + d {
                self.user_emb.get(user, c - 1)
            } else if c < 1 + 2 * d {
                self.item_emb.get(candidates[r], c - 1 - d)
            } else {
                uniforms.get(r, c - 1 - 2 * d)
            }
        });
        let input = tape.constant(input)?;
        let weight = |tape: &mut Tape, name: &str| -> Result<NodeId> {
            if trainable {
                tape.param(&self.phi, name)
            } else {
                let v = self.phi.value(name)?.clone();
                tape.constant(v)
            }
        };
        let w1 = weight(tape, GEN_W1)?;
        let b1 = weight(tape, GEN_B1)?;
        let w2 = weight(tape, GEN_W2)?;
        let b2 = weight(tape, GEN_B2)?;
        let h = tape.matmul(input, w1)?;
        let b1r = tape.repeat_rows(b1, n)?;
        let h = tape.add(h, b1r)?;
        let h = tape.relu(h)?;
        let out = tape.matmul(h, w2)?;
        let b2r = tape.repeat_rows(b2, n)?;
        let out = tape.add(out, b2r)?;
        tape.sigmoid(out)
    }

    /// Detached noise values for a sample (used on the reranker side, where
    /// generator outputs are data, not part of the gradient path).
    pub fn sample(
        &self,
        user: usize,
        candidates: &[usize],
        z: &[f64],
        uniforms: &Array2,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, user, candidates, z, uniforms, false)?;
        Ok(tape.value(out).as_slice().to_vec())
    }

    /// Self-contained checkpoint: MLP weights plus the frozen embedding
    /// tables it was conditioned on.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut store = ParamStore::new();
        for name in [GEN_W1, GEN_B1, GEN_W2, GEN_B2] {
            store.insert(name, self.phi.value(name)?.clone())?;
        }
        store.insert("frozen_user_emb", self.user_emb.clone())?;
        store.insert("frozen_item_emb", self.item_emb.clone())?;
        store.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let store = ParamStore::load(path)?;
        let user_emb = store.value("frozen_user_emb")?.clone();
        let item_emb = store.value("frozen_item_emb")?.clone();
        let mut phi = ParamStore::new();
        for name in [GEN_W1, GEN_B1, GEN_W2, GEN_B2] {
            phi.insert(name, store.value(name)?.clone())?;
        }
        let w1 = phi.value(GEN_W1)?;
        let d_noise = w1.rows().checked_sub(1 + 2 * user_emb.cols()).ok_or_else(|| {
            Error::Checkpoint("generator input layer smaller than its embeddings".into())
        })?;
        let hidden = w1.cols();
        Ok(GeneratorModel { phi, user_emb, item_emb, d_noise, hidden })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn gaussian_respects_clamp_and_mean() {
        let mut r = rng::stream(11, rng::STREAM_NOISE);
        let xs = sample_gaussian(20_000, 0.5, 0.25, &mut r);
        assert!(xs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        // the clamp must actually bite for this sigma
        assert!(xs.iter().any(|&v| v == 0.0) && xs.iter().any(|&v| v == 1.0));
    }

    #[test]
    fn beta_stays_in_open_interval() {
        let mut r = rng::stream(12, rng::STREAM_NOISE);
        for &(a, b) in &[(0.5, 0.5), (2.0, 5.0), (5.0, 1.0), (0.3, 2.0)] {
            let xs = sample_beta(5_000, a, b, &mut r);
            assert!(xs.iter().all(|&v| v > 0.0 && v < 1.0));
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let expect = a / (a + b);
            assert!((mean - expect).abs() < 0.03, "beta({a},{b}) mean {mean} vs {expect}");
        }
    }

    #[test]
    fn model_kind_has_no_heuristic() {
        let spec = NoiseSpec { kind: NoiseKind::Model, ..Default::default() };
        let mut r = rng::stream(1, rng::STREAM_NOISE);
        assert!(heuristic_noise(&spec, 4, &mut r).is_err());
    }

    #[test]
    fn synthesis_matches_between_routes_and_at_extremes() {
        let z = [1.0, 0.0, 1.0, 0.0];
        let mut r = rng::stream(5, rng::STREAM_NOISE);
        let eps = sample_beta(4, 2.0, 5.0, &mut r);
        for &lc in &[0.0, 0.4, 1.0] {
            let vals = synthesize_scores_values(&z, &eps, lc);
            let mut t = Tape::new();
            let e = t.constant(Array2::col_vec(&eps)).unwrap();
            let node = synthesize_scores(&mut t, &z, e, lc).unwrap();
            assert_eq!(t.value(node).as_slice(), vals.as_slice());
        }
        assert_eq!(synthesize_scores_values(&z, &eps, 0.0), z.to_vec());
        assert_eq!(synthesize_scores_values(&z, &eps, 1.0), eps);
    }

    #[test]
    fn fresh_generator_outputs_near_half() {
        let mut r = rng::stream(3, rng::STREAM_GENERATOR_INIT);
        let user_emb = Array2::from_fn(4, 6, |a, b| ((a + b) as f64).sin());
        let item_emb = Array2::from_fn(10, 6, |a, b| ((a * b) as f64).cos());
        let gen = GeneratorModel::init(user_emb, item_emb, 8, 16, &mut r).unwrap();
        let mut nr = rng::stream(3, rng::STREAM_NOISE);
        let cands = [0, 3, 7, 9];
        let z = [1.0, 0.0, 0.0, 1.0];
        let uniforms = gen.draw_uniforms(4, &mut nr);
        let eps = gen.sample(2, &cands, &z, &uniforms).unwrap();
        for e in eps {
            assert!((e - 0.5).abs() < 0.1, "initial eps {e} far from 0.5");
        }
    }

    #[test]
    fn generator_checkpoint_roundtrip() {
        let mut r = rng::stream(8, rng::STREAM_GENERATOR_INIT);
        let gen = GeneratorModel::init(
            Array2::from_fn(3, 5, |a, b| (a as f64 - b as f64) * 0.1),
            Array2::from_fn(7, 5, |a, b| (a * b) as f64 * 0.01,),
            8,
            12,
            &mut r,
        )
        .unwrap();
        let dir = std::env::temp_dir().join("dnr_core_gen_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("generator.ckpt");
        gen.save(&path).unwrap();
        let back = GeneratorModel::load(&path).unwrap();
        assert_eq!(back.d_noise, 8);
        assert_eq!(back.hidden, 12);
        let mut nr = rng::stream(1, rng::STREAM_NOISE);
        let u = gen.draw_uniforms(2, &mut nr);
        assert_eq!(
            gen.sample(1, &[0, 6], &[1.0, 0.0], &u).unwrap(),
            back.sample(1, &[0, 6], &[1.0, 0.0], &u).unwrap()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn generator_rejects_out_of_range_items() {
        let mut r = rng::stream(3, rng::STREAM_GENERATOR_INIT);
        let gen = GeneratorModel::init(
            Array2::zeros(2, 4),
            Array2::zeros(5, 4),
            8,
            8,
            &mut r,
        )
        .unwrap();
        let mut nr = rng::stream(3, rng::STREAM_NOISE);
        let uniforms = gen.draw_uniforms(1, &mut nr);
        assert!(gen.sample(0, &[9], &[0.0], &uniforms).is_err());
        assert!(gen.sample(7, &[1], &[0.0], &uniforms).is_err());
    }
}
