//! Exact discrete verification of the likelihood decompositions behind the
//! denoising objective.
//!
//! Everything here runs on tiny enumerable worlds: scores live on a small
//! per-coordinate grid, relevance is a bit vector, and all distributions are
//! explicit tables. No training code is reused; sums are evaluated term by
//! term so the continuous implementation can be checked against something
//! that cannot silently share its bugs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_COORDS: usize = 3;
pub const MAX_GRID: usize = 4;
const PROB_FLOOR: f64 = 1e-6;

/// A fully enumerable score/relevance world.
///
/// Scores x take values on `grid` in each of `n` coordinates, so x ranges
/// over `grid.len()^n` states indexed in row-major order. Relevance z is a
/// bit vector over the same `n` coordinates, indexed as binary numbers.
#[derive(Debug, Clone)]
pub struct DiscreteWorld {
    pub grid: Vec<f64>,
    pub n: usize,
    /// p(x), length grid^n.
    pub p_x: Vec<f64>,
    /// p(z|x), outer index x, inner length 2^n.
    pub p_z_given_x: Vec<Vec<f64>>,
}

/// Model tables under test: a reranker likelihood q(z|x) and a generator
/// p_phi(x|z).
#[derive(Debug, Clone)]
pub struct TableModel {
    /// q(z|x), outer index x, inner length 2^n.
    pub q: Vec<Vec<f64>>,
    /// p_phi(x|z), outer index z, inner length grid^n.
    pub p_phi: Vec<Vec<f64>>,
}

fn check_distribution(label: &str, row: usize, p: &[f64]) -> Result<()> {
    if let Some(&bad) = p.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Oracle(format!(
            "{label} row {row}: entries must be strictly positive, found {bad}"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Oracle(format!(
            "{label} row {row}: sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

impl DiscreteWorld {
    pub fn num_x(&self) -> usize {
        self.grid.len().pow(self.n as u32)
    }

    pub fn num_z(&self) -> usize {
        1 << self.n
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n > MAX_COORDS {
            return Err(Error::Oracle(format!(
                "world has n={}, supported range is 1..={MAX_COORDS}",
                self.n
            )));
        }
        if self.grid.is_empty() || self.grid.len() > MAX_GRID {
            return Err(Error::Oracle(format!(
                "grid has {} values, supported range is 1..={MAX_GRID}",
                self.grid.len()
            )));
        }
        if self.p_x.len() != self.num_x() {
            return Err(Error::Oracle(format!(
                "p_x has {} entries, expected {}",
                self.p_x.len(),
                self.num_x()
            )));
        }
        check_distribution("p_x", 0, &self.p_x)?;
        if self.p_z_given_x.len() != self.num_x() {
            return Err(Error::Oracle(format!(
                "p_z_given_x has {} rows, expected {}",
                self.p_z_given_x.len(),
                self.num_x()
            )));
        }
        for (x, row) in self.p_z_given_x.iter().enumerate() {
            if row.len() != self.num_z() {
                return Err(Error::Oracle(format!(
                    "p_z_given_x row {x} has {} entries, expected {}",
                    row.len(),
                    self.num_z()
                )));
            }
            check_distribution("p_z_given_x", x, row)?;
        }
        Ok(())
    }

    /// Score vector for state index `x`, row-major over coordinates.
    pub fn x_values(&self, x: usize) -> Vec<f64> {
        let g = self.grid.len();
        let mut idx = x;
        let mut out = vec![0.0; self.n];
        for c in (0..self.n).rev() {
            out[c] = self.grid[idx % g];
            idx /= g;
        }
        out
    }

    /// Marginal p(z) = sum_x p(x) p(z|x).
    pub fn marginal_z(&self, z: usize) -> f64 {
        self.p_x
            .iter()
            .zip(&self.p_z_given_x)
            .map(|(&px, row)| px * row[z])
            .sum()
    }

    /// Exact posterior p(x|z) by Bayes' rule.
    pub fn posterior_x_given_z(&self, z: usize) -> Vec<f64> {
        let pz = self.marginal_z(z);
        self.p_x
            .iter()
            .zip(&self.p_z_given_x)
            .map(|(&px, row)| px * row[z] / pz)
            .collect()
    }
}

impl TableModel {
    pub fn validate(&self, world: &DiscreteWorld) -> Result<()> {
        if self.q.len() != world.num_x() {
            return Err(Error::Oracle(format!(
                "q has {} rows, expected {}",
                self.q.len(),
                world.num_x()
            )));
        }
        for (x, row) in self.q.iter().enumerate() {
            if row.len() != world.num_z() {
                return Err(Error::Oracle(format!(
                    "q row {x} has {} entries, expected {}",
                    row.len(),
                    world.num_z()
                )));
            }
            check_distribution("q", x, row)?;
        }
        if self.p_phi.len() != world.num_z() {
            return Err(Error::Oracle(format!(
                "p_phi has {} rows, expected {}",
                self.p_phi.len(),
                world.num_z()
            )));
        }
        for (z, row) in self.p_phi.iter().enumerate() {
            if row.len() != world.num_x() {
                return Err(Error::Oracle(format!(
                    "p_phi row {z} has {} entries, expected {}",
                    row.len(),
                    world.num_x()
                )));
            }
            check_distribution("p_phi", z, row)?;
        }
        Ok(())
    }

    /// The model whose generator is the exact Bayes posterior; under it the
    /// slack term of the four-way decomposition vanishes.
    pub fn with_bayes_generator(&self, world: &DiscreteWorld) -> TableModel {
        TableModel {
            q: self.q.clone(),
            p_phi: (0..world.num_z())
                .map(|z| world.posterior_x_given_z(z))
                .collect(),
        }
    }
}

// ── decompositions ───────────────────────────────────────────────────────

/// Terms of the three-way split driven by the data distribution:
/// -log p(z) = l_direct + l1 + l2.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Eq3Decomp {
    pub l_direct: f64,
    pub l1: f64,
    pub l2: f64,
    pub neg_log_pz: f64,
}

impl Eq3Decomp {
    pub fn residual(&self) -> f64 {
        self.l_direct + self.l1 + self.l2 - self.neg_log_pz
    }
}

/// Terms of the four-way split driven by the generator:
/// -log p(z) = l_z + l_adv + l_x + delta_x, with delta_x <= 0.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Eq5Decomp {
    pub l_z: f64,
    pub l_adv: f64,
    pub l_x: f64,
    pub delta_x: f64,
    pub neg_log_pz: f64,
}

impl Eq5Decomp {
    pub fn residual(&self) -> f64 {
        self.l_z + self.l_adv + self.l_x + self.delta_x - self.neg_log_pz
    }
}

/// Expected reranker negative log-likelihood under the data distribution.
pub fn loss_direct(world: &DiscreteWorld, model: &TableModel, z: usize) -> f64 {
    -world
        .p_x
        .iter()
        .zip(&model.q)
        .map(|(&px, qrow)| px * qrow[z].ln())
        .sum::<f64>()
}

/// Decompose -log p(z) along the data distribution over scores.
pub fn decompose_eq3(world: &DiscreteWorld, model: &TableModel, z: usize) -> Eq3Decomp {
    let pz = world.marginal_z(z);
    let posterior = world.posterior_x_given_z(z);
    let l_direct = loss_direct(world, model, z);
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for x in 0..world.num_x() {
        let px = world.p_x[x];
        l1 += px * (model.q[x][z] / world.p_z_given_x[x][z]).ln();
        l2 -= px * (px / posterior[x]).ln();
    }
    Eq3Decomp { l_direct, l1, l2, neg_log_pz: -pz.ln() }
}

/// Decompose -log p(z) along the generator distribution over scores.
pub fn decompose_eq5(world: &DiscreteWorld, model: &TableModel, z: usize) -> Eq5Decomp {
    let pz = world.marginal_z(z);
    let posterior = world.posterior_x_given_z(z);
    let phi = &model.p_phi[z];
    let mut l_z = 0.0;
    let mut l_adv = 0.0;
    let mut l_x = 0.0;
    let mut delta_x = 0.0;
    for x in 0..world.num_x() {
        let pf = phi[x];
        l_z -= pf * model.q[x][z].ln();
        l_adv += pf * (model.q[x][z] / world.p_z_given_x[x][z]).ln();
        l_x += pf * (pf / world.p_x[x]).ln();
        delta_x -= pf * (pf / posterior[x]).ln();
    }
    Eq5Decomp { l_z, l_adv, l_x, delta_x, neg_log_pz: -pz.ln() }
}

// ── randomized verification ──────────────────────────────────────────────

fn random_distribution(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut p: Vec<f64> = (0..len).map(|_| rng.random::<f64>() + PROB_FLOOR).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

pub fn random_world(grid_size: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<DiscreteWorld> {
    let mut grid: Vec<f64> = (0..grid_size)
        .map(|i| (i as f64 + rng.random::<f64>()) / grid_size as f64)
        .collect();
    grid.sort_by(f64::total_cmp);
    let world = DiscreteWorld {
        grid,
        n,
        p_x: random_distribution(grid_size.pow(n as u32), rng),
        p_z_given_x: (0..grid_size.pow(n as u32))
            .map(|_| random_distribution(1 << n, rng))
            .collect(),
    };
    world.validate()?;
    Ok(world)
}

pub fn random_model(world: &DiscreteWorld, rng: &mut ChaCha8Rng) -> Result<TableModel> {
    let model = TableModel {
        q: (0..world.num_x())
            .map(|_| random_distribution(world.num_z(), rng))
            .collect(),
        p_phi: (0..world.num_z())
            .map(|_| random_distribution(world.num_x(), rng))
            .collect(),
    };
    model.validate(world)?;
    Ok(model)
}

/// Deliberate corruptions used as negative controls: a verification run
/// that cannot fail when the inputs are broken would prove nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tamper {
    None,
    /// Scale one q row so it no longer normalizes.
    UnnormalizedQ,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    pub worlds: usize,
    pub cases: usize,
    pub max_residual_eq3: f64,
    pub max_residual_eq5: f64,
    pub max_delta_x: f64,
    pub max_bayes_delta_x_abs: f64,
    /// models rejected by the normalization check; any tampering lands here
    pub invalid_models: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Check both decompositions over `worlds` random worlds, every z in each.
/// Also verifies the slack term is non-positive, and that swapping in the
/// Bayes posterior generator drives it to zero.
///
/// Model validity is part of the verification: both residuals are
/// change-of-measure identities that cancel q algebraically, so they hold
/// for any positive table. An unnormalized q can only be caught by the
/// normalization check, and a report with invalid models never passes.
pub fn verify_theory(
    worlds: usize,
    seed: u64,
    tolerance: f64,
    tamper: Tamper,
) -> Result<TheoryReport> {
    let mut rng = crate::rng::stream(seed, crate::rng::STREAM_WORLD);
    let mut report = TheoryReport {
        worlds,
        cases: 0,
        max_residual_eq3: 0.0,
        max_residual_eq5: 0.0,
        max_delta_x: f64::NEG_INFINITY,
        max_bayes_delta_x_abs: 0.0,
        invalid_models: 0,
        tolerance,
        pass: false,
    };
    for w in 0..worlds {
        // cycle through all supported sizes
        let n = 1 + w % MAX_COORDS;
        let grid_size = 2 + w % (MAX_GRID - 1);
        let world = random_world(grid_size, n, &mut rng)?;
        let mut model = random_model(&world, &mut rng)?;
        if tamper == Tamper::UnnormalizedQ {
            model.q[0].iter_mut().for_each(|v| *v *= 1.1);
        }
        if model.validate(&world).is_err() {
            report.invalid_models += 1;
            continue;
        }
        let bayes = model.with_bayes_generator(&world);
        for z in 0..world.num_z() {
            let e3 = decompose_eq3(&world, &model, z);
            let e5 = decompose_eq5(&world, &model, z);
            let e5b = decompose_eq5(&world, &bayes, z);
            report.cases += 1;
            report.max_residual_eq3 = report.max_residual_eq3.max(e3.residual().abs());
            report.max_residual_eq5 = report.max_residual_eq5.max(e5.residual().abs());
            report.max_delta_x = report.max_delta_x.max(e5.delta_x);
            report.max_bayes_delta_x_abs =
                report.max_bayes_delta_x_abs.max(e5b.delta_x.abs());
        }
    }
    report.pass = report.invalid_models == 0
        && report.max_residual_eq3 < tolerance
        && report.max_residual_eq5 < tolerance
        && report.max_delta_x <= 1e-12
        && report.max_bayes_delta_x_abs < 1e-12;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny_world() -> DiscreteWorld {
        DiscreteWorld {
            grid: vec![0.0, 1.0],
            n: 1,
            p_x: vec![0.3, 0.7],
            // rows are [p(z=0|x), p(z=1|x)]
            p_z_given_x: vec![vec![0.8, 0.2], vec![0.4, 0.6]],
        }
    }

    fn tiny_model() -> TableModel {
        TableModel {
            q: vec![vec![0.5, 0.5], vec![0.1, 0.9]],
            p_phi: vec![vec![0.6, 0.4], vec![0.25, 0.75]],
        }
    }

    #[test]
    fn hand_computed_direct_loss() {
        let world = tiny_world();
        let model = tiny_model();
        // z=1: -(0.3 ln 0.5 + 0.7 ln 0.9)
        let expect = -(0.3 * 0.5f64.ln() + 0.7 * 0.9f64.ln());
        assert!((loss_direct(&world, &model, 1) - expect).abs() < 1e-15);
        // marginal: 0.3*0.2 + 0.7*0.6 = 0.48
        assert!((world.marginal_z(1) - 0.48).abs() < 1e-15);
    }

    #[test]
    fn both_decompositions_telescope() {
        let world = tiny_world();
        let model = tiny_model();
        for z in 0..world.num_z() {
            let e3 = decompose_eq3(&world, &model, z);
            let e5 = decompose_eq5(&world, &model, z);
            assert!(e3.residual().abs() < 1e-12, "eq3 residual {}", e3.residual());
            assert!(e5.residual().abs() < 1e-12, "eq5 residual {}", e5.residual());
            assert!(e5.delta_x <= 1e-15, "delta_x {}", e5.delta_x);
        }
    }

    #[test]
    fn data_distribution_generator_recovers_eq3_terms() {
        // Plugging p_phi := p_x into the four-way split must reproduce the
        // three-way terms, with the mismatch term collapsing to zero.
        let world = tiny_world();
        let mut model = tiny_model();
        model.p_phi = vec![world.p_x.clone(); world.num_z()];
        for z in 0..world.num_z() {
            let e3 = decompose_eq3(&world, &model, z);
            let e5 = decompose_eq5(&world, &model, z);
            assert!((e5.l_z - e3.l_direct).abs() < 1e-12);
            assert!((e5.l_adv - e3.l1).abs() < 1e-12);
            assert!(e5.l_x.abs() < 1e-12);
            assert!((e5.delta_x - e3.l2).abs() < 1e-12);
        }
    }

    #[test]
    fn bayes_generator_zeroes_the_slack() {
        let world = tiny_world();
        let model = tiny_model().with_bayes_generator(&world);
        for z in 0..world.num_z() {
            let e5 = decompose_eq5(&world, &model, z);
            assert!(e5.delta_x.abs() < 1e-14, "delta_x {}", e5.delta_x);
        }
    }

    #[test]
    fn validation_names_the_offending_row() {
        let mut world = tiny_world();
        world.p_z_given_x[1] = vec![0.5, 0.6];
        let err = world.validate().unwrap_err().to_string();
        assert!(err.contains("p_z_given_x row 1"), "{err}");

        let mut model = tiny_model();
        model.q[0][0] = -0.5;
        let err = model.validate(&tiny_world()).unwrap_err().to_string();
        assert!(err.contains("q row 0"), "{err}");
    }

    #[test]
    fn tampering_breaks_verification() {
        let ok = verify_theory(10, 99, 1e-9, Tamper::None).unwrap();
        assert!(ok.pass, "{ok:?}");
        assert_eq!(ok.invalid_models, 0);
        let bad = verify_theory(10, 99, 1e-9, Tamper::UnnormalizedQ).unwrap();
        assert!(!bad.pass, "tampered run must fail: {bad:?}");
        assert_eq!(bad.invalid_models, 10);
    }

    #[test]
    fn residuals_cancel_q_so_only_validation_can_catch_tampering() {
        // both decompositions subtract log q right back out, so even a
        // broken q leaves the identities exact; this pins that property
        let world = tiny_world();
        let mut model = tiny_model();
        model.q[0].iter_mut().for_each(|v| *v *= 1.7);
        assert!(model.validate(&world).is_err());
        for z in 0..world.num_z() {
            assert!(decompose_eq3(&world, &model, z).residual().abs() < 1e-12);
            assert!(decompose_eq5(&world, &model, z).residual().abs() < 1e-12);
        }
    }

    #[test]
    fn world_size_limits_enforced() {
        let mut rng = rng::stream(1, rng::STREAM_WORLD);
        assert!(random_world(5, 1, &mut rng).is_err());
        assert!(random_world(2, 4, &mut rng).is_err());
        assert!(random_world(4, 3, &mut rng).is_ok());
    }
}
