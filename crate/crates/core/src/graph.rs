//! Dynamic reverse-mode differentiation tape.
//!
//! Values are computed eagerly as nodes are appended, so the node list is
//! topologically ordered by construction. A backward pass walks the list in
//! reverse once, accumulating adjoints, and deposits gradients only into
//! leaves whose partition tag is active.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameter-set tag attached to every leaf node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    FParams,
    GParams,
    HParams,
    FqParams,
    Data,
}

impl Partition {
    pub const ALL_TRAINABLE: [Partition; 4] = [
        Partition::FParams,
        Partition::GParams,
        Partition::HParams,
        Partition::FqParams,
    ];
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Partition::FParams => "F",
            Partition::GParams => "G",
            Partition::HParams => "H",
            Partition::FqParams => "FQ",
            Partition::Data => "DATA",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Partition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F" => Ok(Partition::FParams),
            "G" => Ok(Partition::GParams),
            "H" => Ok(Partition::HParams),
            "FQ" => Ok(Partition::FqParams),
            "DATA" => Ok(Partition::Data),
            other => Err(Error::Parse {
                line: 0,
                message: format!("unknown partition tag `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf(Partition),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Matrix plus a broadcast row vector (bias add).
    AddRow(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Relu(NodeId),
    /// Mean over each consecutive group of `group` rows.
    MeanPool(NodeId, usize),
    /// Row gather from an embedding table.
    EmbeddingLookup(NodeId, Vec<usize>),
    ConcatCols(NodeId, NodeId),
    LogSoftmax(NodeId),
    /// Batch-mean negative log-likelihood over log-probabilities.
    CrossEntropy(NodeId, Vec<usize>),
    /// Per-row Shannon entropy of softmax(logits).
    EntropyOfSoftmax(NodeId),
    MeanAll(NodeId),
    ScalarScale(NodeId, f64),
    /// Identity forward; backward multiplies the upstream gradient by -lambda.
    GradReverse(NodeId, f64),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients accumulated at leaves by a backward pass, keyed by leaf node id.
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient deposited at `leaf`. Masked or unreached leaves report zeros.
    pub fn get(&self, leaf: NodeId) -> &Tensor {
        &self.grads[&leaf.0]
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, tag: Partition) -> NodeId {
        self.push(Op::Leaf(tag), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let vals = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), vals)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "sub",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let vals = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), vals)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    /// `a` is m-by-n, `b` is a length-n vector broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).rows_cols();
        let (bm, bn) = self.value(b).rows_cols();
        if bm != 1 || bn != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut vals = Vec::with_capacity(m * n);
        let av = self.value(a).values();
        let bv = self.value(b).values();
        for i in 0..m {
            for j in 0..n {
                vals.push(av[i * n + j] + bv[j]);
            }
        }
        let out = Tensor::matrix(m, n, vals)?;
        Ok(self.push(Op::AddRow(a, b), out))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).rows_cols();
        let (kb, n) = self.value(b).rows_cols();
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut vals = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..ka {
                let aik = av[i * ka + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[k * n..(k + 1) * n];
                let orow = &mut vals[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let out = Tensor::matrix(m, n, vals)?;
        Ok(self.push(Op::Matmul(a, b), out))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let vals = self.value(a).values().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), vals).expect("same shape");
        self.push(Op::Relu(a), out)
    }

    /// Mean over each consecutive group of `group` rows; the row count must be
    /// divisible by `group`.
    pub fn mean_pool(&mut self, a: NodeId, group: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).rows_cols();
        if group == 0 || m % group != 0 {
            return Err(Error::Contract(format!(
                "mean_pool: {m} rows not divisible into groups of {group}"
            )));
        }
        let out_rows = m / group;
        let av = self.value(a).values();
        let mut vals = vec![0.0; out_rows * n];
        for i in 0..m {
            let o = i / group;
            for j in 0..n {
                vals[o * n + j] += av[i * n + j];
            }
        }
        let inv = 1.0 / group as f64;
        for v in &mut vals {
            *v *= inv;
        }
        let out = Tensor::matrix(out_rows, n, vals)?;
        Ok(self.push(Op::MeanPool(a, group), out))
    }

    pub fn embedding_lookup(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (vocab, dim) = self.value(table).rows_cols();
        for &ix in indices {
            if ix >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "embedding_lookup",
                    index: ix,
                    limit: vocab,
                });
            }
        }
        let tv = self.value(table).values();
        let mut vals = Vec::with_capacity(indices.len() * dim);
        for &ix in indices {
            vals.extend_from_slice(&tv[ix * dim..(ix + 1) * dim]);
        }
        let out = Tensor::matrix(indices.len(), dim, vals)?;
        Ok(self.push(Op::EmbeddingLookup(table, indices.to_vec()), out))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ma, na) = self.value(a).rows_cols();
        let (mb, nb) = self.value(b).rows_cols();
        if ma != mb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut vals = Vec::with_capacity(ma * (na + nb));
        for i in 0..ma {
            vals.extend_from_slice(&av[i * na..(i + 1) * na]);
            vals.extend_from_slice(&bv[i * nb..(i + 1) * nb]);
        }
        let out = Tensor::matrix(ma, na + nb, vals)?;
        Ok(self.push(Op::ConcatCols(a, b), out))
    }

    /// Row-wise log-softmax with per-row max subtraction.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.value(a).rows_cols();
        let av = self.value(a).values();
        let mut vals = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &x in row {
                sum += (x - max).exp();
            }
            let lse = max + sum.ln();
            for j in 0..n {
                vals[i * n + j] = row[j] - lse;
            }
        }
        let out = Tensor::matrix(m, n, vals).expect("same shape");
        self.push(Op::LogSoftmax(a), out)
    }

    /// Mean over the batch of `-log_probs[i, labels[i]]`.
    pub fn cross_entropy(&mut self, log_probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (m, k) = self.value(log_probs).rows_cols();
        if labels.len() != m {
            return Err(Error::Contract(format!(
                "cross_entropy: {m} rows but {} labels",
                labels.len()
            )));
        }
        for &l in labels {
            if l >= k {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy label",
                    index: l,
                    limit: k,
                });
            }
        }
        let lp = self.value(log_probs).values();
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            total -= lp[i * k + l];
        }
        let out = Tensor::scalar(total / m as f64);
        Ok(self.push(Op::CrossEntropy(log_probs, labels.to_vec()), out))
    }

    /// Per-row entropy of softmax(logits), computed from log-probabilities as
    /// `-sum(exp(lp) * lp)` so near-zero probabilities cannot underflow p*ln p.
    pub fn entropy_of_softmax(&mut self, logits: NodeId) -> NodeId {
        let (m, n) = self.value(logits).rows_cols();
        let av = self.value(logits).values();
        let mut vals = vec![0.0; m];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &x in row {
                sum += (x - max).exp();
            }
            let lse = max + sum.ln();
            let mut h = 0.0;
            for &x in row {
                let lp = x - lse;
                h -= lp.exp() * lp;
            }
            vals[i] = h;
        }
        self.push(Op::EntropyOfSoftmax(logits), Tensor::vector(vals))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let mean = t.values().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::MeanAll(a), Tensor::scalar(mean))
    }

    pub fn scalar_scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let vals = self.value(a).values().iter().map(|v| c * v).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), vals).expect("same shape");
        self.push(Op::ScalarScale(a, c), out)
    }

    /// Identity forward pass; backward multiplies the upstream gradient by
    /// `-lambda`.
    pub fn grad_reverse(&mut self, a: NodeId, lambda: f64) -> Result<NodeId> {
        if lambda < 0.0 {
            return Err(Error::Config(format!(
                "grad_reverse lambda must be nonnegative, got {lambda}"
            )));
        }
        let out = self.value(a).clone();
        Ok(self.push(Op::GradReverse(a, lambda), out))
    }

    /// Reverse pass from a scalar loss. Gradients are accumulated at every
    /// leaf, but only leaves whose tag is in `active` receive deposits; all
    /// other leaves report exactly zero.
    pub fn backward(&mut self, loss: NodeId, active: &[Partition]) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if active.is_empty() {
            return Err(Error::Contract(
                "backward requires a nonempty set of active partitions".into(),
            ));
        }
        let mut adjoints: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(Tensor::scalar(1.0));

        let mut grads: HashMap<usize, Tensor> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(_) = node.op {
                grads.insert(i, Tensor::zeros_like(&node.value));
            }
        }

        for i in (0..=loss.0).rev() {
            let adj = match adjoints[i].take() {
                Some(a) => a,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf(tag) => {
                    if active.contains(tag) {
                        grads.get_mut(&i).expect("leaf registered").add_assign(&adj);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, *a, &adj);
                    accumulate(&mut adjoints, *b, &adj);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adjoints, *a, &adj);
                    let mut neg = adj.clone();
                    neg.scale_assign(-1.0);
                    accumulate(&mut adjoints, *b, &neg);
                }
                Op::AddRow(a, b) => {
                    let (m, n) = self.nodes[a.0].value.rows_cols();
                    accumulate(&mut adjoints, *a, &adj);
                    let mut col_sums = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            col_sums[c] += adj.values()[r * n + c];
                        }
                    }
                    let gb = reshaped_like(&self.nodes[b.0].value, col_sums);
                    accumulate(&mut adjoints, *b, &gb);
                }
                Op::Matmul(a, b) => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let (m, k) = ta.rows_cols();
                    let (_, n) = tb.rows_cols();
                    let g = adj.values();
                    // grad_a = grad_out . b^T
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        for j in 0..n {
                            let grj = g[r * n + j];
                            if grj == 0.0 {
                                continue;
                            }
                            for c in 0..k {
                                ga[r * k + c] += grj * tb.values()[c * n + j];
                            }
                        }
                    }
                    // grad_b = a^T . grad_out
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        for c in 0..k {
                            let arc = ta.values()[r * k + c];
                            if arc == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[c * n + j] += arc * g[r * n + j];
                            }
                        }
                    }
                    accumulate(&mut adjoints, *a, &reshaped_like(ta, ga));
                    accumulate(&mut adjoints, *b, &reshaped_like(tb, gb));
                }
                Op::Relu(a) => {
                    let out = &self.nodes[i].value;
                    let vals = adj
                        .values()
                        .iter()
                        .zip(out.values())
                        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(
                        &mut adjoints,
                        *a,
                        &reshaped_like(&self.nodes[a.0].value, vals),
                    );
                }
                Op::MeanPool(a, group) => {
                    let ta = &self.nodes[a.0].value;
                    let (m, n) = ta.rows_cols();
                    let inv = 1.0 / *group as f64;
                    let mut vals = vec![0.0; m * n];
                    for r in 0..m {
                        let o = r / group;
                        for c in 0..n {
                            vals[r * n + c] = adj.values()[o * n + c] * inv;
                        }
                    }
                    accumulate(&mut adjoints, *a, &reshaped_like(ta, vals));
                }
                Op::EmbeddingLookup(table, indices) => {
                    let tt = &self.nodes[table.0].value;
                    let (_, dim) = tt.rows_cols();
                    let mut vals = vec![0.0; tt.len()];
                    for (r, &ix) in indices.iter().enumerate() {
                        for c in 0..dim {
                            vals[ix * dim + c] += adj.values()[r * dim + c];
                        }
                    }
                    accumulate(&mut adjoints, *table, &reshaped_like(tt, vals));
                }
                Op::ConcatCols(a, b) => {
                    let (m, na) = self.nodes[a.0].value.rows_cols();
                    let (_, nb) = self.nodes[b.0].value.rows_cols();
                    let n = na + nb;
                    let mut va = vec![0.0; m * na];
                    let mut vb = vec![0.0; m * nb];
                    for r in 0..m {
                        va[r * na..(r + 1) * na]
                            .copy_from_slice(&adj.values()[r * n..r * n + na]);
                        vb[r * nb..(r + 1) * nb]
                            .copy_from_slice(&adj.values()[r * n + na..(r + 1) * n]);
                    }
                    accumulate(
                        &mut adjoints,
                        *a,
                        &reshaped_like(&self.nodes[a.0].value, va),
                    );
                    accumulate(
                        &mut adjoints,
                        *b,
                        &reshaped_like(&self.nodes[b.0].value, vb),
                    );
                }
                Op::LogSoftmax(a) => {
                    // grad_z = g - softmax(z) * rowsum(g)
                    let out = &self.nodes[i].value;
                    let (m, n) = out.rows_cols();
                    let mut vals = vec![0.0; m * n];
                    for r in 0..m {
                        let grow = &adj.values()[r * n..(r + 1) * n];
                        let gsum: f64 = grow.iter().sum();
                        for c in 0..n {
                            let p = out.values()[r * n + c].exp();
                            vals[r * n + c] = grow[c] - p * gsum;
                        }
                    }
                    accumulate(
                        &mut adjoints,
                        *a,
                        &reshaped_like(&self.nodes[a.0].value, vals),
                    );
                }
                Op::CrossEntropy(log_probs, labels) => {
                    let tlp = &self.nodes[log_probs.0].value;
                    let (m, k) = tlp.rows_cols();
                    let g = adj.scalar_value();
                    let mut vals = vec![0.0; m * k];
                    for (r, &l) in labels.iter().enumerate() {
                        vals[r * k + l] = -g / m as f64;
                    }
                    accumulate(&mut adjoints, *log_probs, &reshaped_like(tlp, vals));
                }
                Op::EntropyOfSoftmax(logits) => {
                    // dH/dz_j = -p_j * (log p_j + H)
                    let tz = &self.nodes[logits.0].value;
                    let (m, n) = tz.rows_cols();
                    let h = self.nodes[i].value.values();
                    let mut vals = vec![0.0; m * n];
                    for r in 0..m {
                        let row = &tz.values()[r * n..(r + 1) * n];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for &x in row {
                            sum += (x - max).exp();
                        }
                        let lse = max + sum.ln();
                        let u = adj.values()[r];
                        for c in 0..n {
                            let lp = row[c] - lse;
                            vals[r * n + c] = -u * lp.exp() * (lp + h[r]);
                        }
                    }
                    accumulate(&mut adjoints, *logits, &reshaped_like(tz, vals));
                }
                Op::MeanAll(a) => {
                    let ta = &self.nodes[a.0].value;
                    let g = adj.scalar_value() / ta.len() as f64;
                    let vals = vec![g; ta.len()];
                    accumulate(&mut adjoints, *a, &reshaped_like(ta, vals));
                }
                Op::ScalarScale(a, c) => {
                    let mut g = adj.clone();
                    g.scale_assign(*c);
                    accumulate(&mut adjoints, *a, &g);
                }
                Op::GradReverse(a, lambda) => {
                    if *lambda == 0.0 {
                        // exact disconnect: deposit true zeros, not -0.0
                        let z = Tensor::zeros_like(&self.nodes[a.0].value);
                        accumulate(&mut adjoints, *a, &z);
                    } else {
                        let mut g = adj.clone();
                        g.scale_assign(-lambda);
                        accumulate(&mut adjoints, *a, &g);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(adjoints: &mut [Option<Tensor>], id: NodeId, grad: &Tensor) {
    match &mut adjoints[id.0] {
        Some(existing) => existing.add_assign(grad),
        slot => *slot = Some(grad.clone()),
    }
}

fn reshaped_like(like: &Tensor, values: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), values).expect("gradient shape matches value shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(g: &mut Graph, rows: usize, cols: usize, vals: &[f64]) -> NodeId {
        let t = Tensor::matrix(rows, cols, vals.to_vec()).unwrap();
        g.leaf(t, Partition::Data)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let x = mat(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let id = mat(&mut g, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let y = g.matmul(id, x).unwrap();
        assert_eq!(g.value(y).values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_sum() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = mat(&mut g, 2, 1, &[1.0, 1.0]);
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).values(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 3, &[0.0; 6]);
        let b = mat(&mut g, 2, 2, &[0.0; 4]);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn log_softmax_uniform_row() {
        let mut g = Graph::new();
        let z = mat(&mut g, 1, 4, &[0.0; 4]);
        let lp = g.log_softmax(z);
        for &v in g.value(lp).values() {
            assert!((v - (-(4.0f64.ln()))).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_no_overflow() {
        let mut g = Graph::new();
        let z = mat(&mut g, 1, 2, &[1000.0, 0.0]);
        let lp = g.log_softmax(z);
        let v = g.value(lp).values();
        assert!(v[0].abs() < 1e-12);
        assert!((v[1] + 1000.0).abs() < 1e-9);
        assert!(g.value(lp).all_finite());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let z = mat(&mut g, 2, 3, &[0.3, -1.2, 2.0, 5.0, 5.0, -3.0]);
        let lp = g.log_softmax(z);
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| g.value(lp).at(r, c).exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut g = Graph::new();
        let z = mat(&mut g, 3, 10, &[0.0; 30]);
        let lp = g.log_softmax(z);
        let ce = g.cross_entropy(lp, &[0, 3, 9]).unwrap();
        assert!((g.value(ce).scalar_value() - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        let mut g = Graph::new();
        // log-probs with probability 1 on the label
        let big = -1e9;
        let lp = mat(&mut g, 1, 3, &[0.0, big, big]);
        let ce = g.cross_entropy(lp, &[0]).unwrap();
        assert_eq!(g.value(ce).scalar_value(), 0.0);
    }

    #[test]
    fn cross_entropy_half_prob() {
        let mut g = Graph::new();
        let lp = mat(
            &mut g,
            1,
            3,
            &[0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()],
        );
        let ce = g.cross_entropy(lp, &[0]).unwrap();
        assert!((g.value(ce).scalar_value() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let lp = mat(&mut g, 1, 3, &[0.0; 3]);
        assert!(g.cross_entropy(lp, &[3]).is_err());
    }

    #[test]
    fn entropy_uniform_is_ln_k() {
        let mut g = Graph::new();
        let z = mat(&mut g, 1, 4, &[0.0; 4]);
        let h = g.entropy_of_softmax(z);
        assert!((g.value(h).values()[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_near_one_hot_is_near_zero() {
        let mut g = Graph::new();
        let z = mat(&mut g, 1, 3, &[50.0, 0.0, 0.0]);
        let h = g.entropy_of_softmax(z);
        assert!(g.value(h).values()[0] < 1e-12);
    }

    #[test]
    fn entropy_hand_case() {
        // probs [0.5, 0.25, 0.25] -> 1.5 ln 2
        let mut g = Graph::new();
        let z = mat(
            &mut g,
            1,
            3,
            &[0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()],
        );
        let h = g.entropy_of_softmax(z);
        assert!((g.value(h).values()[0] - 1.5 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn grad_reverse_forward_is_bitwise_identity() {
        let mut g = Graph::new();
        let x = mat(&mut g, 1, 2, &[1.0, 2.0]);
        let y = g.grad_reverse(x, 0.15).unwrap();
        assert_eq!(g.value(y).values(), g.value(x).values());
    }

    #[test]
    fn grad_reverse_backward_negates_and_scales() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap(),
            Partition::GParams,
        );
        let r = g.grad_reverse(x, 0.15).unwrap();
        // upstream gradient [1, -2] via loss = mean(2 * r .* [1, -2])-style
        // construction; simplest: loss = mean_all(r * w) with chosen weights.
        let w = mat(&mut g, 2, 1, &[1.0, -2.0]);
        let s = g.matmul(r, w).unwrap();
        let loss = g.mean_all(s);
        let grads = g.backward(loss, &[Partition::GParams]).unwrap();
        let got = grads.get(x);
        assert!((got.values()[0] - (-0.15)).abs() < 1e-15);
        assert!((got.values()[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn grad_reverse_zero_lambda_gives_exact_zero() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap(),
            Partition::GParams,
        );
        let r = g.grad_reverse(x, 0.0).unwrap();
        let w = mat(&mut g, 2, 1, &[3.0, 4.0]);
        let s = g.matmul(r, w).unwrap();
        let loss = g.mean_all(s);
        let grads = g.backward(loss, &[Partition::GParams]).unwrap();
        assert_eq!(grads.get(x).values(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_reverse_rejects_negative_lambda() {
        let mut g = Graph::new();
        let x = mat(&mut g, 1, 2, &[1.0, 2.0]);
        assert!(g.grad_reverse(x, -0.1).is_err());
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = mat(&mut g, 1, 2, &[-1.0, 2.0]);
        let y = g.relu(x);
        assert_eq!(g.value(y).values(), &[0.0, 2.0]);
    }

    #[test]
    fn mean_pool_of_identical_rows_is_that_row() {
        let mut g = Graph::new();
        let x = mat(&mut g, 3, 2, &[5.0, -1.0, 5.0, -1.0, 5.0, -1.0]);
        let y = g.mean_pool(x, 3).unwrap();
        assert_eq!(g.value(y).values(), &[5.0, -1.0]);
    }

    #[test]
    fn embedding_out_of_vocab_is_an_error() {
        let mut g = Graph::new();
        let table = mat(&mut g, 4, 2, &[0.0; 8]);
        assert!(g.embedding_lookup(table, &[4]).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(),
            Partition::GParams,
        );
        assert!(g.backward(x, &[Partition::GParams]).is_err());
    }

    #[test]
    fn backward_masks_excluded_partitions() {
        let mut g = Graph::new();
        let a = g.leaf(
            Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(),
            Partition::GParams,
        );
        let b = g.leaf(
            Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap(),
            Partition::FqParams,
        );
        let y = g.matmul(a, b).unwrap();
        let loss = g.mean_all(y);
        let grads = g.backward(loss, &[Partition::GParams]).unwrap();
        assert_eq!(grads.get(b).values(), &[0.0, 0.0]);
        assert_ne!(grads.get(a).values(), &[0.0, 0.0]);
    }

    #[test]
    fn two_backward_passes_are_identical() {
        let mut g = Graph::new();
        let a = g.leaf(
            Tensor::matrix(2, 2, vec![0.3, -1.0, 0.7, 2.0]).unwrap(),
            Partition::FParams,
        );
        let z = g.log_softmax(a);
        let loss = g.cross_entropy(z, &[0, 1]).unwrap();
        let g1 = g.backward(loss, &[Partition::FParams]).unwrap();
        let g2 = g.backward(loss, &[Partition::FParams]).unwrap();
        assert_eq!(g1.get(a).values(), g2.get(a).values());
    }
}
