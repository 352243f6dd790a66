//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A `Tape` records every forward operation as a node holding its output
//! value and the recipe that produced it. `backward` replays the tape once
//! in reverse construction order (which is a reverse topological order by
//! construction), accumulating adjoints and depositing parameter gradients
//! into a [`ParamStore`].

mod gradcheck;
mod store;

pub use gradcheck::grad_check;
pub use store::{AdamConfig, ParamStore};

use crate::array::Array2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// The nine primitive kinds exposed through the generic `forward_op` entry.
/// Structured ops (gathers, repeats, fused losses) have dedicated methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Matmul,
    Add,
    Mul,
    Sigmoid,
    Relu,
    SoftmaxRows,
    Log,
    Mean,
    ConcatCols,
}

impl std::str::FromStr for OpKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => OpKind::Matmul,
            "add" => OpKind::Add,
            "mul" => OpKind::Mul,
            "sigmoid" => OpKind::Sigmoid,
            "relu" => OpKind::Relu,
            "softmax_rows" => OpKind::SoftmaxRows,
            "log" => OpKind::Log,
            "mean" => OpKind::Mean,
            "concat_cols" => OpKind::ConcatCols,
            other => return Err(Error::Model(format!("unknown op name `{other}`"))),
        })
    }
}

// Inputs below the clamp floor are treated as the floor, with gradient 1/floor.
const LOG_FLOOR: f64 = 1e-12;
// Predictions are clamped into [BCE_EPS, 1 - BCE_EPS]; outside the clamp the
// gradient is exactly zero, matching the flat clamped forward.
const BCE_EPS: f64 = 1e-7;

enum Op {
    Const,
    Param { name: String },
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Sigmoid { x: NodeId },
    Relu { x: NodeId },
    SoftmaxRows { x: NodeId },
    Log { x: NodeId },
    Mean { x: NodeId },
    ConcatCols { xs: Vec<NodeId> },
    Transpose { x: NodeId },
    Scale { x: NodeId, factor: f64 },
    GatherRows { x: NodeId, idx: Vec<usize> },
    MeanRows { x: NodeId },
    RepeatRows { x: NodeId },
    RepeatCols { x: NodeId },
    Bce { pred: NodeId, labels: Array2, mask: Array2, mask_sum: f64 },
    Mmd2 { x: NodeId, subset: Option<Vec<usize>>, reference: Vec<f64>, bandwidth: f64 },
}

struct Node {
    value: Array2,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2 {
        &self.nodes[id.0].value
    }

    /// Scalar payload of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "scalar_value",
                left: Error::shape_str(v.shape()),
                right: "1x1".into(),
            });
        }
        Ok(v.get(0, 0))
    }

    fn push(&mut self, op_name: &'static str, value: Array2, op: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
        Error::ShapeMismatch {
            op,
            left: Error::shape_str(a),
            right: Error::shape_str(b),
        }
    }

    // ── leaves ───────────────────────────────────────────────────────────

    pub fn constant(&mut self, value: Array2) -> Result<NodeId> {
        self.push("constant", value, Op::Const)
    }

    /// A leaf bound to a store entry; backward accumulates into its gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let value = store.value(name)?.clone();
        self.push("param", value, Op::Param { name: name.to_string() })
    }

    // ── primitives ───────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Self::shape_err("matmul", va.shape(), vb.shape()));
        }
        let out = va.matmul(vb);
        self.push("matmul", out, Op::Matmul { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Self::shape_err("add", va.shape(), vb.shape()));
        }
        let out = va.zip_map(vb, |x, y| x + y);
        self.push("add", out, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Self::shape_err("mul", va.shape(), vb.shape()));
        }
        let out = va.zip_map(vb, |x, y| x * y);
        self.push("mul", out, Op::Mul { a, b })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(stable_sigmoid);
        self.push("sigmoid", out, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", out, Op::Relu { x })
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let mut out = v.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        self.push("softmax_rows", out, Op::SoftmaxRows { x })
    }

    /// Natural log with the input clamped up to a small floor, so zeros in
    /// probability tables do not produce infinities.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| v.max(LOG_FLOOR).ln());
        self.push("log", out, Op::Log { x })
    }

    /// Mean over all entries, yielding a 1x1 node.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let m = v.as_slice().iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Array2::scalar(m), Op::Mean { x })
    }

    /// Concatenate along columns; every input must share a row count.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Model("concat_cols with no inputs".into()));
        }
        let rows = self.value(xs[0]).rows();
        let mut cols = 0;
        for &x in xs {
            let v = self.value(x);
            if v.rows() != rows {
                return Err(Self::shape_err("concat_cols", (rows, cols), v.shape()));
            }
            cols += v.cols();
        }
        let mut out = Array2::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &x in xs {
                let src = self.value(x);
                out.row_mut(r)[offset..offset + src.cols()].copy_from_slice(src.row(r));
                offset += src.cols();
            }
        }
        self.push("concat_cols", out, Op::ConcatCols { xs: xs.to_vec() })
    }

    // ── structured ops ───────────────────────────────────────────────────

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).transpose();
        self.push("transpose", out, Op::Transpose { x })
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let out = self.value(x).map(|v| factor * v);
        self.push("scale", out, Op::Scale { x, factor })
    }

    /// Row lookup: output row i is input row idx[i]. Rows may repeat;
    /// backward scatter-adds, so repeated rows accumulate gradient.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::Model(format!(
                "gather_rows: index {bad} out of range for {} rows",
                v.rows()
            )));
        }
        let mut out = Array2::zeros(idx.len(), v.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(v.row(i));
        }
        self.push("gather_rows", out, Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Column-wise mean over rows: r x c -> 1 x c.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let r = v.rows() as f64;
        let mut out = Array2::zeros(1, v.cols());
        for i in 0..v.rows() {
            out.row_mut(0)
                .iter_mut()
                .zip(v.row(i))
                .for_each(|(o, &x)| *o += x / r);
        }
        self.push("mean_rows", out, Op::MeanRows { x })
    }

    /// Tile a 1 x c row vector down to `times` x c.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> Result<NodeId> {
        let v = self.value(x);
        if v.rows() != 1 {
            return Err(Self::shape_err("repeat_rows", v.shape(), (1, v.cols())));
        }
        let mut out = Array2::zeros(times, v.cols());
        for r in 0..times {
            out.row_mut(r).copy_from_slice(v.row(0));
        }
        self.push("repeat_rows", out, Op::RepeatRows { x })
    }

    /// Tile an r x 1 column vector out to r x `times`.
    pub fn repeat_cols(&mut self, x: NodeId, times: usize) -> Result<NodeId> {
        let v = self.value(x);
        if v.cols() != 1 {
            return Err(Self::shape_err("repeat_cols", v.shape(), (v.rows(), 1)));
        }
        let mut out = Array2::zeros(v.rows(), times);
        for r in 0..v.rows() {
            out.row_mut(r).fill(v.get(r, 0));
        }
        self.push("repeat_cols", out, Op::RepeatCols { x })
    }

    // ── fused losses ─────────────────────────────────────────────────────

    /// Masked-mean binary cross-entropy between predictions and fixed 0/1
    /// labels. Mask entries weight cells; the sum of the mask must be
    /// positive. Predictions are clamped away from {0, 1} before the logs.
    pub fn bce_loss(&mut self, pred: NodeId, labels: &Array2, mask: &Array2) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != labels.shape() {
            return Err(Self::shape_err("bce_loss", p.shape(), labels.shape()));
        }
        if p.shape() != mask.shape() {
            return Err(Self::shape_err("bce_loss", p.shape(), mask.shape()));
        }
        let mask_sum: f64 = mask.as_slice().iter().sum();
        if mask_sum <= 0.0 {
            return Err(Error::Model(
                "bce_loss over an empty batch (mask sums to zero)".into(),
            ));
        }
        let mut acc = 0.0;
        for i in 0..p.len() {
            let ph = p.as_slice()[i].clamp(BCE_EPS, 1.0 - BCE_EPS);
            let z = labels.as_slice()[i];
            acc -= mask.as_slice()[i] * (z * ph.ln() + (1.0 - z) * (1.0 - ph).ln());
        }
        self.push(
            "bce_loss",
            Array2::scalar(acc / mask_sum),
            Op::Bce { pred, labels: labels.clone(), mask: mask.clone(), mask_sum },
        )
    }

    /// Squared maximum mean discrepancy (biased V-statistic) between the
    /// entries of `x` and a fixed reference sample, under an RBF kernel with
    /// the given bandwidth. `subset` restricts which flat entries of `x`
    /// participate; the reference side is always used whole.
    pub fn mmd2_rbf(
        &mut self,
        x: NodeId,
        subset: Option<Vec<usize>>,
        reference: &[f64],
        bandwidth: f64,
    ) -> Result<NodeId> {
        if !(bandwidth > 0.0) {
            return Err(Error::Model(format!("mmd2_rbf: bandwidth {bandwidth} must be positive")));
        }
        if reference.is_empty() {
            return Err(Error::Model("mmd2_rbf: empty reference sample".into()));
        }
        let v = self.value(x);
        if let Some(sub) = &subset {
            if sub.is_empty() {
                return Err(Error::Model("mmd2_rbf: empty subset".into()));
            }
            if let Some(&bad) = sub.iter().find(|&&i| i >= v.len()) {
                return Err(Error::Model(format!(
                    "mmd2_rbf: subset index {bad} out of range for {} entries",
                    v.len()
                )));
            }
        }
        let xs: Vec<f64> = match &subset {
            Some(sub) => sub.iter().map(|&i| v.as_slice()[i]).collect(),
            None => v.as_slice().to_vec(),
        };
        let value = mmd2_value(&xs, reference, bandwidth);
        self.push(
            "mmd2_rbf",
            Array2::scalar(value),
            Op::Mmd2 { x, subset, reference: reference.to_vec(), bandwidth },
        )
    }

    // ── generic entry ────────────────────────────────────────────────────

    /// Dispatch one of the nine primitive kinds by name. Arity is checked
    /// here; the typed methods do the rest.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let want = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Model(format!(
                    "{kind:?} expects {n} input(s), got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match kind {
            OpKind::Matmul => {
                want(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                want(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                want(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Sigmoid => {
                want(1)?;
                self.sigmoid(inputs[0])
            }
            OpKind::Relu => {
                want(1)?;
                self.relu(inputs[0])
            }
            OpKind::SoftmaxRows => {
                want(1)?;
                self.softmax_rows(inputs[0])
            }
            OpKind::Log => {
                want(1)?;
                self.log(inputs[0])
            }
            OpKind::Mean => {
                want(1)?;
                self.mean(inputs[0])
            }
            OpKind::ConcatCols => {
                if inputs.is_empty() {
                    return Err(Error::Model("ConcatCols expects at least 1 input".into()));
                }
                self.concat_cols(inputs)
            }
        }
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Consumes the tape; parameter
    /// gradients are added into `store` (call `zero_grads` first for a
    /// fresh pass; without it, passes accumulate). Intermediate adjoints
    /// are dropped as soon as their node has been processed.
    pub fn backward(self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: Error::shape_str(self.value(loss).shape()),
                right: "1x1".into(),
            });
        }
        let mut grads: Vec<Option<Array2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param { name } => store.accumulate_grad(name, &g)?,
                Op::Matmul { a, b } => {
                    let ga = g.matmul(&self.nodes[b.0].value.transpose());
                    let gb = self.nodes[a.0].value.transpose().matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul { a, b } => {
                    let ga = g.zip_map(&self.nodes[b.0].value, |gv, bv| gv * bv);
                    let gb = g.zip_map(&self.nodes[a.0].value, |gv, av| gv * av);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sigmoid { x } => {
                    let gx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu { x } => {
                    let gx = g.zip_map(&self.nodes[x.0].value, |gv, xv| {
                        if xv > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxRows { x } => {
                    let y = &node.value;
                    let mut gx = Array2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 =
                            g.row(r).iter().zip(y.row(r)).map(|(&gv, &yv)| gv * yv).sum();
                        for c in 0..y.cols() {
                            gx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Log { x } => {
                    let gx = g.zip_map(&self.nodes[x.0].value, |gv, xv| gv / xv.max(LOG_FLOOR));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mean { x } => {
                    let src = &self.nodes[x.0].value;
                    let per = g.get(0, 0) / src.len() as f64;
                    accumulate(&mut grads, *x, Array2::filled(src.rows(), src.cols(), per));
                }
                Op::ConcatCols { xs } => {
                    let mut offset = 0;
                    for &x in xs {
                        let src = &self.nodes[x.0].value;
                        let mut gx = Array2::zeros(src.rows(), src.cols());
                        for r in 0..src.rows() {
                            gx.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + src.cols()]);
                        }
                        offset += src.cols();
                        accumulate(&mut grads, x, gx);
                    }
                }
                Op::Transpose { x } => {
                    accumulate(&mut grads, *x, g.transpose());
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads, *x, g.map(|gv| factor * gv));
                }
                Op::GatherRows { x, idx } => {
                    let src = &self.nodes[x.0].value;
                    let mut gx = Array2::zeros(src.rows(), src.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        gx.row_mut(i)
                            .iter_mut()
                            .zip(g.row(r))
                            .for_each(|(o, &gv)| *o += gv);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanRows { x } => {
                    let src = &self.nodes[x.0].value;
                    let r = src.rows() as f64;
                    let mut gx = Array2::zeros(src.rows(), src.cols());
                    for i in 0..src.rows() {
                        gx.row_mut(i)
                            .iter_mut()
                            .zip(g.row(0))
                            .for_each(|(o, &gv)| *o = gv / r);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RepeatRows { x } => {
                    let src = &self.nodes[x.0].value;
                    let mut gx = Array2::zeros(1, src.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(0)
                            .iter_mut()
                            .zip(g.row(r))
                            .for_each(|(o, &gv)| *o += gv);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RepeatCols { x } => {
                    let src = &self.nodes[x.0].value;
                    let mut gx = Array2::zeros(src.rows(), 1);
                    for r in 0..g.rows() {
                        let s: f64 = g.row(r).iter().sum();
                        gx.set(r, 0, s);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Bce { pred, labels, mask, mask_sum } => {
                    let p = &self.nodes[pred.0].value;
                    let gscalar = g.get(0, 0);
                    let mut gx = Array2::zeros(p.rows(), p.cols());
                    for idx in 0..p.len() {
                        let pv = p.as_slice()[idx];
                        if pv < BCE_EPS || pv > 1.0 - BCE_EPS {
                            continue;
                        }
                        let z = labels.as_slice()[idx];
                        let m = mask.as_slice()[idx];
                        gx.as_mut_slice()[idx] =
                            gscalar * m * (pv - z) / (pv * (1.0 - pv) * mask_sum);
                    }
                    accumulate(&mut grads, *pred, gx);
                }
                Op::Mmd2 { x, subset, reference, bandwidth } => {
                    let v = &self.nodes[x.0].value;
                    let xs: Vec<f64> = match subset {
                        Some(sub) => sub.iter().map(|&i| v.as_slice()[i]).collect(),
                        None => v.as_slice().to_vec(),
                    };
                    let dxs = mmd2_grad(&xs, reference, *bandwidth);
                    let gscalar = g.get(0, 0);
                    let mut gx = Array2::zeros(v.rows(), v.cols());
                    match subset {
                        Some(sub) => {
                            for (p, &i) in sub.iter().enumerate() {
                                gx.as_mut_slice()[i] += gscalar * dxs[p];
                            }
                        }
                        None => {
                            for (o, d) in gx.as_mut_slice().iter_mut().zip(dxs) {
                                *o = gscalar * d;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Array2>], id: NodeId, delta: Array2) {
    match &mut grads[id.0] {
        Some(g) => g.add_assign_scaled(&delta, 1.0),
        slot => *slot = Some(delta),
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rbf(a: f64, b: f64, bandwidth: f64) -> f64 {
    let d = a - b;
    (-d * d / (2.0 * bandwidth * bandwidth)).exp()
}

fn mmd2_value(xs: &[f64], ys: &[f64], h: f64) -> f64 {
    let (m, n) = (xs.len() as f64, ys.len() as f64);
    let mut sxx = 0.0;
    for &a in xs {
        for &b in xs {
            sxx += rbf(a, b, h);
        }
    }
    let mut sxy = 0.0;
    for &a in xs {
        for &b in ys {
            sxy += rbf(a, b, h);
        }
    }
    let mut syy = 0.0;
    for &a in ys {
        for &b in ys {
            syy += rbf(a, b, h);
        }
    }
    sxx / (m * m) - 2.0 * sxy / (m * n) + syy / (n * n)
}

fn mmd2_grad(xs: &[f64], ys: &[f64], h: f64) -> Vec<f64> {
    let (m, n) = (xs.len() as f64, ys.len() as f64);
    let h2 = h * h;
    xs.iter()
        .map(|&xp| {
            let own: f64 = xs.iter().map(|&xj| rbf(xp, xj, h) * (xj - xp) / h2).sum();
            let cross: f64 = ys.iter().map(|&yj| rbf(xp, yj, h) * (xp - yj) / h2).sum();
            2.0 * own / (m * m) + 2.0 * cross / (m * n)
        })
        .collect()
}
