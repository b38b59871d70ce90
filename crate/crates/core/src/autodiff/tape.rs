use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::{matmul_nn, matmul_nt, matmul_tn, wrap_angle, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constants and frozen parameters skip gradient accumulation entirely;
    /// trainable parameter leaves accumulate for reporting.
    Leaf { trainable: bool },
    /// y = x * w^T + b, with w stored [out, in].
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// y = mul * x + add, elementwise with scalar coefficients; only the
    /// multiplier matters to the backward pass.
    Affine { x: Var, mul: f64 },
    Elu(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    WrapAngle(Var),
    /// Symmetric hard clamp to [-bound, bound]; gradient is 1 inside the
    /// range and 0 where saturated.
    ClampSym { x: Var, bound: f64 },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, from: usize, to: usize },
    /// [B, D] -> [B, 1] sum over columns.
    RowSum(Var),
    /// [B, D] -> [B, 1] Euclidean norm of each row.
    RowNorm(Var),
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
}

/// Define-by-run computation graph. Nodes are appended in topological order;
/// `backward` walks them in reverse. A tape is built per loss evaluation and
/// dropped afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: BTreeMap<String, (Var, bool)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value, grad: None });
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`, if any
    /// flowed there.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { trainable: false }, t)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Bind a named parameter from the store as a trainable leaf. Repeated
    /// binds of the same name return the same node so gradient contributions
    /// accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        self.bind(store, name, true)
    }

    /// Bind a named parameter as a constant: it participates in the forward
    /// pass but is excluded from `param_grads`, and a gradient check will see
    /// exactly zero for it.
    pub fn frozen_param(&mut self, store: &ParamStore, name: &str) -> Var {
        self.bind(store, name, false)
    }

    fn bind(&mut self, store: &ParamStore, name: &str, trainable: bool) -> Var {
        if let Some(&(v, t)) = self.bound.get(name) {
            assert_eq!(
                t, trainable,
                "parameter `{name}` bound with conflicting trainability"
            );
            return v;
        }
        let tensor = store.get(name).unwrap_or_else(|| {
            panic!("parameter `{name}` not present in store");
        });
        let v = self.push(Op::Leaf { trainable }, tensor.clone());
        self.bound.insert(name.to_string(), (v, trainable));
        v
    }

    // ---- ops -----------------------------------------------------------

    /// y = x * w^T + b. `x` is `[B, in]` or `[in]`, `w` is `[out, in]`,
    /// `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xb, xt) = (self.value(x).rows(), self.value(x).cols());
        let ws = self.value(w).shape.clone();
        assert_eq!(ws.len(), 2, "linear weight must be 2-D, got {ws:?}");
        let (out, inp) = (ws[0], ws[1]);
        assert_eq!(xt, inp, "linear input width {xt} != weight fan-in {inp}");
        assert_eq!(self.value(b).len(), out, "linear bias length mismatch");
        let mut y = vec![0.0; xb * out];
        matmul_nt(&self.value(x).data, &self.value(w).data, &mut y, xb, inp, out);
        for r in 0..xb {
            let row = &mut y[r * out..(r + 1) * out];
            for (yv, bv) in row.iter_mut().zip(&self.value(b).data) {
                *yv += bv;
            }
        }
        let shape = if self.value(x).shape.len() == 2 { vec![xb, out] } else { vec![out] };
        self.push(Op::Linear { x, w, b }, Tensor::new(shape, y))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        assert_eq!(
            self.value(a).shape,
            self.value(b).shape,
            "elementwise op shape mismatch"
        );
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(op, Tensor::new(shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data: Vec<f64> = self.value(x).data.iter().map(|&v| f(v)).collect();
        let shape = self.value(x).shape.clone();
        self.push(op, Tensor::new(shape, data))
    }

    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        self.unary(x, Op::Affine { x, mul }, |v| mul * v + add)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Elu(x), |v| if v > 0.0 { v } else { v.exp_m1() })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sin(x), f64::sin)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Op::Cos(x), f64::cos)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Wrap to (-pi, pi]; derivative is 1 almost everywhere.
    pub fn wrap_angle(&mut self, x: Var) -> Var {
        self.unary(x, Op::WrapAngle(x), wrap_angle)
    }

    pub fn clamp_sym(&mut self, x: Var, bound: f64) -> Var {
        self.unary(x, Op::ClampSym { x, bound }, |v| v.clamp(-bound, bound))
    }

    /// Concatenate along columns. All parts must share the same row count
    /// and rank.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let rank2 = self.value(parts[0]).shape.len() == 2;
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            let c = t.cols();
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let shape = if rank2 { vec![rows, total] } else { vec![total] };
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(shape, data))
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Var {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        assert!(from < to && to <= cols, "slice_cols [{from}, {to}) out of {cols}");
        let w = to - from;
        let mut data = vec![0.0; rows * w];
        for r in 0..rows {
            data[r * w..(r + 1) * w].copy_from_slice(&t.row(r)[from..to]);
        }
        let shape = if t.shape.len() == 2 { vec![rows, w] } else { vec![w] };
        self.push(Op::SliceCols { x, from, to }, Tensor::new(shape, data))
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let data: Vec<f64> = (0..rows).map(|r| t.row(r).iter().sum()).collect();
        let shape = if t.shape.len() == 2 { vec![rows, 1] } else { vec![1] };
        let _ = cols;
        self.push(Op::RowSum(x), Tensor::new(shape, data))
    }

    pub fn row_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let rows = t.rows();
        let data: Vec<f64> = (0..rows)
            .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let shape = if t.shape.len() == 2 { vec![rows, 1] } else { vec![1] };
        self.push(Op::RowNorm(x), Tensor::new(shape, data))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).data.iter().sum();
        self.push(Op::MeanAll(x), Tensor::scalar(s / n))
    }

    // ---- backward ------------------------------------------------------

    fn add_grad(&mut self, v: Var, contrib: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if matches!(node.op, Op::Leaf { trainable: false }) {
            return;
        }
        debug_assert_eq!(contrib.len(), node.value.len());
        match &mut node.grad {
            Some(g) => {
                for (gv, cv) in g.iter_mut().zip(&contrib) {
                    *gv += cv;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    /// Reverse pass from a scalar root. Clears previous gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape
            )));
        }
        if !self.nodes[root.0].value.data[0].is_finite() {
            return Err(Error::NonFinite("backward root".into()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let g = match self.nodes[id].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf { .. } => {}
                Op::Linear { x, w, b } => {
                    let (bsz, inp) = (self.value(x).rows(), self.value(x).cols());
                    let out = self.value(w).shape[0];
                    // dx = dy * w
                    let mut dx = vec![0.0; bsz * inp];
                    matmul_nn(&g, &self.value(w).data, &mut dx, bsz, out, inp);
                    // dw = dy^T * x
                    let mut dw = vec![0.0; out * inp];
                    matmul_tn(&g, &self.value(x).data, &mut dw, bsz, out, inp);
                    // db = column sums of dy
                    let mut db = vec![0.0; out];
                    for r in 0..bsz {
                        for (dbv, gv) in db.iter_mut().zip(&g[r * out..(r + 1) * out]) {
                            *dbv += gv;
                        }
                    }
                    self.add_grad(x, dx);
                    self.add_grad(w, dw);
                    self.add_grad(b, db);
                }
                Op::Add(a, b) => {
                    self.add_grad(a, g.clone());
                    self.add_grad(b, g);
                }
                Op::Sub(a, b) => {
                    self.add_grad(a, g.clone());
                    self.add_grad(b, g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> =
                        g.iter().zip(&self.value(b).data).map(|(gv, bv)| gv * bv).collect();
                    let db: Vec<f64> =
                        g.iter().zip(&self.value(a).data).map(|(gv, av)| gv * av).collect();
                    self.add_grad(a, da);
                    self.add_grad(b, db);
                }
                Op::Affine { x, mul, .. } => {
                    self.add_grad(x, g.iter().map(|v| v * mul).collect());
                }
                Op::Elu(x) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(x).data.iter().zip(&self.nodes[id].value.data))
                        .map(|(gv, (&xv, &yv))| if xv > 0.0 { *gv } else { gv * (yv + 1.0) })
                        .collect();
                    self.add_grad(x, d);
                }
                Op::Tanh(x) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[id].value.data)
                        .map(|(gv, &yv)| gv * (1.0 - yv * yv))
                        .collect();
                    self.add_grad(x, d);
                }
                Op::Exp(x) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[id].value.data)
                        .map(|(gv, &yv)| gv * yv)
                        .collect();
                    self.add_grad(x, d);
                }
                Op::Abs(x) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&self.value(x).data)
                        .map(|(gv, &xv)| gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 })
                        .collect();
                    self.add_grad(x, d);
                }
                Op::Sin(x) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&self.value(x).data)
                        .map(|(gv, &xv)| gv * xv.cos())
                        .collect();
                    self.add_grad(x, d);
                }
                Op::Cos(x) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&self.value(x).data)
                        .map(|(gv, &xv)| -gv * xv.sin())
                        .collect();
                    self.add_grad(x, d);
                }
                Op::Square(x) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&self.value(x).data)
                        .map(|(gv, &xv)| gv * 2.0 * xv)
                        .collect();
                    self.add_grad(x, d);
                }
                Op::WrapAngle(x) => {
                    self.add_grad(x, g);
                }
                Op::ClampSym { x, bound } => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&self.value(x).data)
                        .map(|(gv, &xv)| if xv.abs() < bound { *gv } else { 0.0 })
                        .collect();
                    self.add_grad(x, d);
                }
                Op::ConcatCols(parts) => {
                    let rows = self.nodes[id].value.rows();
                    let total = self.nodes[id].value.cols();
                    let mut off = 0;
                    for p in parts {
                        let c = self.value(p).cols();
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        self.add_grad(p, dp);
                        off += c;
                    }
                }
                Op::SliceCols { x, from, to } => {
                    let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
                    let w = to - from;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + from..r * cols + to].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    self.add_grad(x, dx);
                }
                Op::RowSum(x) => {
                    let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols..(r + 1) * cols].fill(g[r]);
                    }
                    self.add_grad(x, dx);
                }
                Op::RowNorm(x) => {
                    let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let norm = self.nodes[id].value.data[r];
                        if norm > 0.0 {
                            let xr = self.value(x).row(r);
                            for (d, &xv) in dx[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
                                *d = g[r] * xv / norm;
                            }
                        }
                    }
                    self.add_grad(x, dx);
                }
                Op::SumAll(x) => {
                    let n = self.value(x).len();
                    self.add_grad(x, vec![g[0]; n]);
                }
                Op::MeanAll(x) => {
                    let n = self.value(x).len();
                    self.add_grad(x, vec![g[0] / n as f64; n]);
                }
            }
        }
        Ok(())
    }

    /// Gradients for all trainable bound parameters, in name order. Bound but
    /// unreached parameters report exact zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &(v, trainable)) in &self.bound {
            if !trainable {
                continue;
            }
            let node = &self.nodes[v.0];
            let grad = match &node.grad {
                Some(g) => Tensor { shape: node.value.shape.clone(), data: g.clone() },
                None => Tensor::zeros(node.value.shape.clone()),
            };
            out.insert(name.clone(), grad);
        }
        out
    }

    /// Gradient of a bound parameter by name (zero tensor if unreached),
    /// regardless of trainability.
    pub fn param_grad(&self, name: &str) -> Option<Tensor> {
        self.bound.get(name).map(|&(v, _)| {
            let node = &self.nodes[v.0];
            match &node.grad {
                Some(g) => Tensor { shape: node.value.shape.clone(), data: g.clone() },
                None => Tensor::zeros(node.value.shape.clone()),
            }
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradients_match_hand_derivation() {
        // loss = sum(w * x) with x fixed -> grad_w = x
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![0.5, -1.0, 2.0]));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w");
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let prod = tape.mul(w, x);
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        let g = tape.param_grad("w").unwrap();
        assert_eq!(g.data, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn disconnected_param_gets_zero_grad() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::vector(vec![2.0]));
        store.insert("unused", Tensor::vector(vec![7.0]));
        let mut tape = Tape::new();
        let u = tape.param(&store, "used");
        let _n = tape.param(&store, "unused");
        let loss = tape.sum_all(u);
        tape.backward(loss).unwrap();
        let grads = tape.param_grads();
        assert_eq!(grads["used"].data, vec![1.0]);
        assert_eq!(grads["unused"].data, vec![0.0]);
    }

    #[test]
    fn non_scalar_root_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn frozen_param_reports_zero_and_is_excluded() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(vec![3.0]));
        let mut tape = Tape::new();
        let p = tape.frozen_param(&store, "p");
        let sq = tape.square(p);
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert!(tape.param_grads().is_empty());
        // the freeze contract: exactly zero gradient on the frozen leaf
        assert_eq!(tape.param_grad("p").unwrap().data, vec![0.0]);
    }

    #[test]
    fn repeated_binding_accumulates() {
        // loss = sum(p) + sum(p^2): dp = 1 + 2p
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(vec![2.0]));
        let mut tape = Tape::new();
        let p1 = tape.param(&store, "p");
        let p2 = tape.param(&store, "p");
        assert_eq!(p1, p2);
        let sq = tape.square(p2);
        let sum = tape.add(p1, sq);
        let loss = tape.sum_all(sum);
        tape.backward(loss).unwrap();
        assert_eq!(tape.param_grad("p").unwrap().data, vec![5.0]);
    }
}
