//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! Every node is evaluated eagerly when it is pushed, so a [`Graph`] always
//! holds forward values in topological order. [`Graph::backward`] sweeps the
//! tape in reverse from a scalar loss node.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{conv1d_same, logsumexp_axis, valid_range, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    MatMul(NodeId, NodeId),
    Outer(NodeId, NodeId),
    Conv1d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Sigmoid(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    ClampMin(NodeId, f64),
    Softmax(NodeId, usize),
    LogSumExp(NodeId, usize),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    ColNorm(NodeId),
    Gather(NodeId, usize, Vec<usize>),
    /// Max over rows; stores the winning row per column.
    MaxRows(NodeId, Vec<usize>),
    Broadcast(NodeId),
    ConcatRows(NodeId, NodeId),
    Reshape(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// A recorded computation. Single-threaded; build one per forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

/// Gradients of a scalar loss with respect to every node of a graph.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, NodeId>,
}

impl Gradients {
    /// Gradient for `node`; all zeros when the node does not reach the loss.
    pub fn wrt(&self, node: NodeId) -> Tensor {
        self.grads[node.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[node.0]))
    }

    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).map(|&id| self.wrt(id))
    }

    /// Gradients of every registered parameter, keyed by name.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, &id)| (k.clone(), self.wrt(id)))
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_axis(x: &Tensor, axis: usize) -> Tensor {
    let lse = logsumexp_axis(x, axis).expect("checked by caller");
    let mut out = x.clone();
    let (r, c) = (x.rows(), x.cols());
    for i in 0..r {
        for j in 0..c {
            let m = if axis == 0 { lse.data()[j] } else { lse.data()[i] };
            out.set(i, j, (x.at(i, j) - m).exp());
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that is not a named parameter. Gradients still reach it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.leaf(value);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn matrix(&self, a: NodeId, op: &str) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.len() != 2 {
            return shape_err(format!("{op} needs a matrix, got {s:?}"));
        }
        Ok((s[0], s[1]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    /// Adds the constant `c` to every entry.
    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::Offset(a), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return shape_err(format!("matmul: {m}x{k} by {k2}x{n}"));
        }
        let (x, y) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let xv = x.at(i, p);
                for j in 0..n {
                    out[i * n + j] += xv * y.at(p, j);
                }
            }
        }
        let v = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// `out[i, j] = a_i · b_j` over the flattened values of `a` and `b`.
    pub fn outer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let (m, n) = (x.len(), y.len());
        let out = x
            .iter()
            .flat_map(|&xi| y.iter().map(move |&yj| xi * yj))
            .collect();
        let v = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::Outer(a, b), v))
    }

    pub fn conv1d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = conv1d_same(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(
            Op::Conv1d {
                input,
                weight,
                bias,
            },
            v,
        ))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    /// `max(x, floor)` elementwise; gradient passes where `x >= floor`.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let v = self.value(a).map(|x| x.max(floor));
        self.push(Op::ClampMin(a, floor), v)
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.matrix(a, "softmax")?;
        if axis > 1 {
            return shape_err(format!("softmax axis {axis}"));
        }
        let v = softmax_axis(self.value(a), axis);
        Ok(self.push(Op::Softmax(a, axis), v))
    }

    pub fn logsumexp(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let v = logsumexp_axis(self.value(a), axis)?;
        Ok(self.push(Op::LogSumExp(a, axis), v))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        self.push(Op::Mean(a), v)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (r, c) = self.matrix(a, "sum_axis")?;
        let x = self.value(a);
        let v = match axis {
            0 => Tensor::row(&(0..c).map(|j| (0..r).map(|i| x.at(i, j)).sum()).collect::<Vec<_>>()),
            1 => Tensor::column(&(0..r).map(|i| x.row_slice(i).iter().sum()).collect::<Vec<_>>()),
            _ => return shape_err(format!("sum_axis axis {axis}")),
        };
        Ok(self.push(Op::SumAxis(a, axis), v))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Euclidean norm of every column: `R × C` → `1 × C`.
    pub fn col_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.matrix(a, "col_norm")?;
        let x = self.value(a);
        let norms: Vec<f64> = (0..c)
            .map(|j| (0..r).map(|i| x.at(i, j).powi(2)).sum::<f64>().sqrt())
            .collect();
        let v = Tensor::row(&norms);
        Ok(self.push(Op::ColNorm(a), v))
    }

    /// Select rows (`axis = 0`) or columns (`axis = 1`) by index; indices may repeat.
    pub fn gather(&mut self, a: NodeId, axis: usize, indices: &[usize]) -> Result<NodeId> {
        let (r, c) = self.matrix(a, "gather")?;
        if indices.is_empty() {
            return shape_err("gather with no indices");
        }
        let x = self.value(a);
        let v = match axis {
            0 => {
                if indices.iter().any(|&i| i >= r) {
                    return shape_err(format!("gather row index out of {r}"));
                }
                let data = indices.iter().flat_map(|&i| x.row_slice(i).to_vec()).collect();
                Tensor::matrix(indices.len(), c, data)?
            }
            1 => {
                if indices.iter().any(|&j| j >= c) {
                    return shape_err(format!("gather column index out of {c}"));
                }
                let mut data = Vec::with_capacity(r * indices.len());
                for i in 0..r {
                    data.extend(indices.iter().map(|&j| x.at(i, j)));
                }
                Tensor::matrix(r, indices.len(), data)?
            }
            _ => return shape_err(format!("gather axis {axis}")),
        };
        Ok(self.push(Op::Gather(a, axis, indices.to_vec()), v))
    }

    /// Column-wise max over rows (`R × C` → `1 × C`), ties to the lower row.
    pub fn max_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.matrix(a, "max_rows")?;
        let x = self.value(a);
        let mut arg = vec![0usize; c];
        let mut best = vec![0.0; c];
        for j in 0..c {
            let mut b = 0;
            for i in 1..r {
                if x.at(i, j) > x.at(b, j) {
                    b = i;
                }
            }
            arg[j] = b;
            best[j] = x.at(b, j);
        }
        let v = Tensor::row(&best);
        Ok(self.push(Op::MaxRows(a, arg), v))
    }

    /// Expand a scalar, `R × 1` or `1 × C` value to `rows × cols`.
    pub fn broadcast(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let x = self.value(a);
        let (xr, xc) = match x.shape() {
            [] => (1, 1),
            [n] if *n == 1 => (1, 1),
            [r, c] => (*r, *c),
            s => return shape_err(format!("broadcast from {s:?}")),
        };
        if !(xr == rows || xr == 1) || !(xc == cols || xc == 1) {
            return shape_err(format!("broadcast {xr}x{xc} to {rows}x{cols}"));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(x.data()[(i % xr) * xc + (j % xc)]);
            }
        }
        let v = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::Broadcast(a), v))
    }

    /// Stack two matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.matrix(a, "concat_rows")?;
        let (rb, cb) = self.matrix(b, "concat_rows")?;
        if ca != cb {
            return shape_err(format!("concat_rows: {ra}x{ca} and {rb}x{cb}"));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let v = Tensor::matrix(ra + rb, ca, data)?;
        Ok(self.push(Op::ConcatRows(a, b), v))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Reverse sweep from `loss`, which must hold exactly one value.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |id: NodeId, delta: Tensor| match &mut grads[id.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.rows(), x.cols(), y.cols());
                let mut da = Tensor::zeros(&[m, k]);
                let mut db = Tensor::zeros(&[k, n]);
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g.at(i, j) * y.at(p, j);
                        }
                        da.set(i, p, s);
                    }
                }
                for p in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += x.at(i, p) * g.at(i, j);
                        }
                        db.set(p, j, s);
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Outer(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, n) = (x.len(), y.len());
                let mut da = x.map(|_| 0.0);
                let mut db = y.map(|_| 0.0);
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.data()[i * n + j];
                        da.data_mut()[i] += gij * y.data()[j];
                        db.data_mut()[j] += gij * x.data()[i];
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Conv1d {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (cin, t) = (x.shape()[0], x.shape()[1]);
                let (cout, k) = (w.shape()[0], w.shape()[2]);
                let pad = (k - 1) / 2;
                let mut dx = Tensor::zeros(x.shape());
                let mut dw = Tensor::zeros(w.shape());
                let mut db = Tensor::zeros(self.shape(*bias));
                for c in 0..cout {
                    let gr = &g.data()[c * t..(c + 1) * t];
                    db.data_mut()[c] = gr.iter().sum();
                    for i in 0..cin {
                        let xr = &x.data()[i * t..(i + 1) * t];
                        for kk in 0..k {
                            let (lo, hi) = valid_range(t, kk, pad);
                            let wv = w.data()[(c * cin + i) * k + kk];
                            let mut sw = 0.0;
                            let dxr = &mut dx.data_mut()[i * t..(i + 1) * t];
                            for tt in lo..hi {
                                let src = tt + kk - pad;
                                sw += xr[src] * gr[tt];
                                dxr[src] += wv * gr[tt];
                            }
                            dw.data_mut()[(c * cin + i) * k + kk] = sw;
                        }
                    }
                }
                acc(*input, dx);
                acc(*weight, dw);
                acc(*bias, db);
            }
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |gv, y| gv * y * (1.0 - y))),
            Op::Relu(a) => acc(
                *a,
                g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
            ),
            Op::Exp(a) => acc(*a, g.zip_map(out, |gv, y| gv * y)),
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| gv / x)),
            Op::Sqrt(a) => acc(*a, g.zip_map(out, |gv, y| gv * 0.5 / y)),
            Op::Recip(a) => acc(*a, g.zip_map(out, |gv, y| -gv * y * y)),
            Op::ClampMin(a, floor) => acc(
                *a,
                g.zip_map(self.value(*a), |gv, x| if x >= *floor { gv } else { 0.0 }),
            ),
            Op::Softmax(a, axis) => {
                let (r, c) = (out.rows(), out.cols());
                let mut dx = Tensor::zeros(&[r, c]);
                if *axis == 0 {
                    for j in 0..c {
                        let dot: f64 = (0..r).map(|i| g.at(i, j) * out.at(i, j)).sum();
                        for i in 0..r {
                            dx.set(i, j, out.at(i, j) * (g.at(i, j) - dot));
                        }
                    }
                } else {
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| g.at(i, j) * out.at(i, j)).sum();
                        for j in 0..c {
                            dx.set(i, j, out.at(i, j) * (g.at(i, j) - dot));
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::LogSumExp(a, axis) => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        let k = if *axis == 0 { j } else { i };
                        let (lse, gv) = (out.data()[k], g.data()[k]);
                        let p = if lse == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (x.at(i, j) - lse).exp()
                        };
                        dx.set(i, j, gv * p);
                    }
                }
                acc(*a, dx);
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), g.item())),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, Tensor::full(self.shape(*a), g.item() / n));
            }
            Op::SumAxis(a, axis) => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        dx.set(i, j, g.data()[if *axis == 0 { j } else { i }]);
                    }
                }
                acc(*a, dx);
            }
            Op::ColNorm(a) => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let mut dx = Tensor::zeros(&[r, c]);
                for j in 0..c {
                    let n = out.data()[j];
                    if n > 0.0 {
                        for i in 0..r {
                            dx.set(i, j, g.data()[j] * x.at(i, j) / n);
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::Gather(a, axis, indices) => {
                let x = self.value(*a);
                let mut dx = Tensor::zeros(x.shape());
                let c = x.cols();
                if *axis == 0 {
                    for (row, &src) in indices.iter().enumerate() {
                        for j in 0..c {
                            dx.data_mut()[src * c + j] += g.at(row, j);
                        }
                    }
                } else {
                    for i in 0..x.rows() {
                        for (col, &src) in indices.iter().enumerate() {
                            dx.data_mut()[i * c + src] += g.at(i, col);
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::MaxRows(a, arg) => {
                let mut dx = Tensor::zeros(self.shape(*a));
                for (j, &i) in arg.iter().enumerate() {
                    dx.set(i, j, g.data()[j]);
                }
                acc(*a, dx);
            }
            Op::Broadcast(a) => {
                let src = self.value(*a);
                let (xr, xc) = match src.shape() {
                    [r, c] => (*r, *c),
                    _ => (1, 1),
                };
                let (r, c) = (out.rows(), out.cols());
                let mut dx = Tensor::zeros(src.shape());
                for i in 0..r {
                    for j in 0..c {
                        dx.data_mut()[(i % xr) * xc + (j % xc)] += g.at(i, j);
                    }
                }
                acc(*a, dx);
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                let da = Tensor::new(self.shape(*a).to_vec(), g.data()[..na].to_vec())
                    .expect("shape preserved");
                let db = Tensor::new(self.shape(*b).to_vec(), g.data()[na..].to_vec())
                    .expect("shape preserved");
                acc(*a, da);
                acc(*b, db);
            }
            Op::Reshape(a) => acc(
                *a,
                g.reshaped(self.shape(*a)).expect("reshape preserves length"),
            ),
        }
    }
}
