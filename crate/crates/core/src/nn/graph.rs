//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward operation as a node. Parameters are read
//! in place from a borrowed [`ParamStore`]; their gradients come back from
//! [`Graph::backward`] as owned buffers so the store can be updated once the
//! graph is dropped.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::tensor::{ParamId, ParamStore, Tensor};
use super::NnError;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

const GELU_COEFF: f32 = 0.044_715;
// sqrt(2 / pi)
const SQRT_2_OVER_PI: f32 = 0.797_884_6;

/// Handle to a node in one particular graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    index: usize,
    graph: u64,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Dropout {
        x: Var,
        scale_mask: Vec<f32>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f32>,
        layout: AttentionLayout,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<u32>>,
        weights: Vec<f32>,
        probs: Vec<f32>,
        total_weight: f32,
    },
}

#[derive(Debug, Clone, Copy)]
struct AttentionLayout {
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

/// A single forward/backward computation.
pub struct Graph<'p> {
    id: u64,
    params: Option<&'p ParamStore>,
    param_nodes: HashMap<ParamId, Var>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    train: bool,
    backward_done: bool,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        _ => {
            let cols = *shape.last().unwrap();
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], index: usize, len: usize) -> &mut Vec<f32> {
    grads[index].get_or_insert_with(|| vec![0.0; len])
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn matmul_bt_into(g: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f32>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn matmul_at_into(a: &[f32], g: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
    }
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(values: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; values.len()];
    for (row, o) in values.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for (oi, &x) in o.iter_mut().zip(row) {
            *oi = (x - max).exp();
            sum += *oi;
        }
        o.iter_mut().for_each(|oi| *oi /= sum);
    }
    out
}

impl<'p> Graph<'p> {
    /// A graph without parameters, for free-standing computations.
    pub fn new(train: bool) -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            params: None,
            param_nodes: HashMap::new(),
            nodes: Vec::new(),
            grads: Vec::new(),
            train,
            backward_done: false,
        }
    }

    pub fn with_params(params: &'p ParamStore, train: bool) -> Self {
        Self {
            params: Some(params),
            ..Self::new(train)
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn check(&self, v: Var) -> Result<&Node, NnError> {
        if v.graph != self.id {
            return Err(NnError::ForeignVar);
        }
        Ok(&self.nodes[v.index])
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.index].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        let node = &self.nodes[v.index];
        match node.op {
            Op::Param(id) => &self.params.expect("param node without store").get(id).data,
            _ => &node.value,
        }
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, requires_grad: bool, name: &'static str) -> Result<Var, NnError> {
        if !value.iter().all(|x| x.is_finite()) {
            return Err(NnError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            index: self.nodes.len() - 1,
            graph: self.id,
        })
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var, NnError> {
        self.push(t.shape.clone(), t.data.clone(), Op::Input, false, "input")
    }

    /// Input whose gradient is tracked and readable through [`Graph::grad`].
    pub fn input(&mut self, t: &Tensor) -> Result<Var, NnError> {
        self.push(t.shape.clone(), t.data.clone(), Op::Input, true, "input")
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let shape = store.get(id).shape.clone();
        self.nodes.push(Node {
            shape,
            value: Vec::new(),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var {
            index: self.nodes.len() - 1,
            graph: self.id,
        };
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NnError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.needs_grad(&[a, b]);
        self.push(vec![m, n], out, Op::MatMul(a, b), rg, "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NnError> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(NnError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    /// Elementwise sum of equal shapes, or a row-broadcast when `b` is a
    /// vector matching the last dimension of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
            let rg = self.needs_grad(&[a, b]);
            return self.push(sa, out, Op::Add(a, b), rg, "add");
        }
        if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            let cols = sb[0];
            let bias = self.value(b);
            let out = self
                .value(a)
                .chunks(cols)
                .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
                .collect();
            let rg = self.needs_grad(&[a, b]);
            return self.push(sa, out, Op::AddBias(a, b), rg, "add");
        }
        Err(NnError::ShapeMismatch {
            op: "add",
            detail: format!("{sa:?} + {sb:?}"),
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.needs_grad(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var, NnError> {
        self.check(a)?;
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let rg = self.needs_grad(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, factor), rg, "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NnError> {
        self.check(a)?;
        let total = self.value(a).iter().sum::<f32>();
        let rg = self.needs_grad(&[a]);
        self.push(Vec::new(), vec![total], Op::Sum(a), rg, "sum")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NnError> {
        self.check(a)?;
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let rg = self.needs_grad(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), rg, "gelu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NnError> {
        self.check(a)?;
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let rg = self.needs_grad(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Tanh(a), rg, "tanh")
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NnError> {
        self.check(a)?;
        let (_, cols) = rows_cols(self.shape(a));
        let out = softmax_rows(self.value(a), cols);
        let rg = self.needs_grad(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a), rg, "softmax")
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then applies
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var, NnError> {
        self.check(x)?;
        self.same_shape("layer_norm", gamma, beta)?;
        let (rows, cols) = rows_cols(self.shape(x));
        if self.shape(gamma) != [cols] {
            return Err(NnError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("gamma {:?} for rows of {cols}", self.shape(gamma)),
            });
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    /// Inverted dropout. The identity in eval mode or when `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f32, rng: &mut R) -> Result<Var, NnError> {
        self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let scale_mask: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&scale_mask).map(|(v, m)| v * m).collect();
        let rg = self.needs_grad(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Dropout { x, scale_mask }, rg, "dropout")
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var, NnError> {
        self.check(table)?;
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(NnError::ShapeMismatch {
                op: "embedding",
                detail: format!("table {shape:?}"),
            });
        }
        let (n, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= n) {
            return Err(NnError::IndexOutOfRange { index: bad as usize, len: n });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&t[i as usize * dim..(i as usize + 1) * dim]);
        }
        let rg = self.needs_grad(&[table]);
        self.push(
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NnError> {
        self.check(x)?;
        let (n, cols) = rows_cols(self.shape(x));
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(NnError::IndexOutOfRange { index: bad, len: n });
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&xs[r * cols..(r + 1) * cols]);
        }
        let rg = self.needs_grad(&[x]);
        self.push(
            vec![rows.len(), cols],
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
            "select_rows",
        )
    }

    /// Multi-head scaled dot-product attention over `[batch * seq, hidden]`
    /// projections. Keys with `key_mask == 0` receive zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[u8],
        batch: usize,
        heads: usize,
    ) -> Result<Var, NnError> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let shape = self.shape(q).to_vec();
        let (rows, hidden) = rows_cols(&shape);
        if batch == 0 || rows % batch != 0 || key_mask.len() != rows || heads == 0 || hidden % heads != 0 {
            return Err(NnError::ShapeMismatch {
                op: "attention",
                detail: format!("{shape:?} with batch {batch}, heads {heads}, mask {}", key_mask.len()),
            });
        }
        let layout = AttentionLayout {
            batch,
            seq: rows / batch,
            heads,
            head_dim: hidden / heads,
        };
        let AttentionLayout { seq, head_dim, .. } = layout;
        let scale = 1.0 / (head_dim as f32).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * hidden];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let mask = &key_mask[b * seq..(b + 1) * seq];
            for h in 0..heads {
                let off = h * head_dim;
                for i in 0..seq {
                    let qi = &qs[(b * seq + i) * hidden + off..][..head_dim];
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..seq {
                        if mask[j] == 0 {
                            continue;
                        }
                        let kj = &ks[(b * seq + j) * hidden + off..][..head_dim];
                        let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f32>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut total = 0.0;
                    for j in 0..seq {
                        if mask[j] != 0 {
                            p[j] = (scores[j] - max).exp();
                            total += p[j];
                        }
                    }
                    if total > 0.0 {
                        p.iter_mut().for_each(|x| *x /= total);
                    }
                    let o = &mut out[(b * seq + i) * hidden + off..][..head_dim];
                    for j in 0..seq {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let vj = &vs[(b * seq + j) * hidden + off..][..head_dim];
                        for (od, vd) in o.iter_mut().zip(vj) {
                            *od += p[j] * vd;
                        }
                    }
                }
            }
        }
        let rg = self.needs_grad(&[q, k, v]);
        self.push(shape, out, Op::Attention { q, k, v, probs, layout }, rg, "attention")
    }

    /// Mean negative log-likelihood over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>]) -> Result<Var, NnError> {
        let weights = vec![1.0; targets.len()];
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    /// Cross-entropy normalized by the total weight of rows with a target.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<u32>],
        weights: &[f32],
    ) -> Result<Var, NnError> {
        self.check(logits)?;
        let (rows, classes) = rows_cols(self.shape(logits));
        if self.shape(logits).len() != 2 || targets.len() != rows || weights.len() != rows {
            return Err(NnError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits {:?}, {} targets", self.shape(logits), targets.len()),
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t as usize >= classes) {
            return Err(NnError::IndexOutOfRange { index: *bad as usize, len: classes });
        }
        let total_weight: f32 = targets
            .iter()
            .zip(weights)
            .filter(|(t, _)| t.is_some())
            .map(|(_, w)| w)
            .sum();
        if total_weight <= 0.0 {
            return Err(NnError::NoTargets);
        }
        let lv = self.value(logits);
        let probs = softmax_rows(lv, classes);
        let mut loss = 0.0f32;
        for (r, (t, w)) in targets.iter().zip(weights).enumerate() {
            if let Some(t) = t {
                let row = &lv[r * classes..(r + 1) * classes];
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f32>().ln();
                loss += w * (lse - row[*t as usize]);
            }
        }
        let rg = self.needs_grad(&[logits]);
        self.push(
            Vec::new(),
            vec![loss / total_weight],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                total_weight,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Populates gradients of the scalar `loss` and returns one gradient
    /// buffer per parameter in the store (zeros for untouched parameters).
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Vec<f32>>, NnError> {
        self.check(loss)?;
        if self.backward_done {
            return Err(NnError::AlreadyBackpropagated);
        }
        if self.value(loss).len() != 1 || !self.shape(loss).iter().all(|&d| d == 1) {
            return Err(NnError::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![1.0]);

        for i in (0..=loss.index).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut param_grads = Vec::new();
        if let Some(store) = self.params {
            for (id, _, t) in store.iter() {
                let g = self
                    .param_nodes
                    .get(&id)
                    .and_then(|v| grads[v.index].clone())
                    .unwrap_or_else(|| vec![0.0; t.len()]);
                param_grads.push(g);
            }
        }
        self.grads = grads;
        Ok(param_grads)
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let rg = |v: &Var| self.nodes[v.index].requires_grad;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if rg(a) {
                    let ga = accumulate(grads, a.index, m * k);
                    matmul_bt_into(g, self.value(*b), ga, m, k, n);
                }
                if rg(b) {
                    let gb = accumulate(grads, b.index, k * n);
                    matmul_at_into(self.value(*a), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if rg(v) {
                        let gv = accumulate(grads, v.index, g.len());
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if rg(a) {
                    let ga = accumulate(grads, a.index, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if rg(bias) {
                    let cols = self.shape(*bias)[0];
                    let gb = accumulate(grads, bias.index, cols);
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    let bv = self.value(*b);
                    let ga = accumulate(grads, a.index, g.len());
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                }
                if rg(b) {
                    let av = self.value(*a);
                    let gb = accumulate(grads, b.index, g.len());
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(a, f) => {
                if rg(a) {
                    let ga = accumulate(grads, a.index, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * f);
                }
            }
            Op::Sum(a) => {
                if rg(a) {
                    let n = self.value(*a).len();
                    let ga = accumulate(grads, a.index, n);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Gelu(a) => {
                if rg(a) {
                    let av = self.value(*a);
                    let ga = accumulate(grads, a.index, g.len());
                    for ((x, gi), ai) in ga.iter_mut().zip(g).zip(av) {
                        *x += gi * gelu_grad(*ai);
                    }
                }
            }
            Op::Tanh(a) => {
                if rg(a) {
                    let ga = accumulate(grads, a.index, g.len());
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(&node.value) {
                        *x += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Softmax(a) => {
                if rg(a) {
                    let (_, cols) = rows_cols(&node.shape);
                    let ga = accumulate(grads, a.index, g.len());
                    for ((gr, yr), out) in g.chunks(cols).zip(node.value.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: f32 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = rows_cols(&node.shape);
                if rg(gamma) {
                    let gg = accumulate(grads, gamma.index, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if rg(beta) {
                    let gb = accumulate(grads, beta.index, cols);
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                if rg(x) {
                    let gamma_v = self.value(*gamma);
                    let gx = accumulate(grads, x.index, rows * cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gamma_v[c];
                        }
                        let mean_d = dxhat.iter().sum::<f32>() / cols as f32;
                        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f32>() / cols as f32;
                        for c in 0..cols {
                            gx[r * cols + c] += inv_std[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Dropout { x, scale_mask } => {
                if rg(x) {
                    let gx = accumulate(grads, x.index, g.len());
                    for ((a, gi), m) in gx.iter_mut().zip(g).zip(scale_mask) {
                        *a += gi * m;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if rg(table) {
                    let dim = self.shape(*table)[1];
                    let n = self.value(*table).len();
                    let gt = accumulate(grads, table.index, n);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * dim..(id as usize + 1) * dim];
                        dst.iter_mut().zip(&g[r * dim..(r + 1) * dim]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if rg(x) {
                    let (_, cols) = rows_cols(self.shape(*x));
                    let n = self.value(*x).len();
                    let gx = accumulate(grads, x.index, n);
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut gx[r * cols..(r + 1) * cols];
                        dst.iter_mut().zip(&g[i * cols..(i + 1) * cols]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Attention { q, k, v, probs, layout } => {
                self.backprop_attention(g, *q, *k, *v, probs, *layout, grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total_weight,
            } => {
                if rg(logits) {
                    let (_, classes) = rows_cols(self.shape(*logits));
                    let gl = accumulate(grads, logits.index, probs.len());
                    for (r, (t, w)) in targets.iter().zip(weights).enumerate() {
                        let Some(t) = t else { continue };
                        let coeff = g[0] * w / total_weight;
                        let row = &mut gl[r * classes..(r + 1) * classes];
                        for (c, x) in row.iter_mut().enumerate() {
                            let p = probs[r * classes + c];
                            let onehot = if c == *t as usize { 1.0 } else { 0.0 };
                            *x += coeff * (p - onehot);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        g: &[f32],
        q: Var,
        k: Var,
        v: Var,
        probs: &[f32],
        layout: AttentionLayout,
        grads: &mut [Option<Vec<f32>>],
    ) {
        let AttentionLayout {
            batch,
            seq,
            heads,
            head_dim,
        } = layout;
        let hidden = heads * head_dim;
        let scale = 1.0 / (head_dim as f32).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let n = qs.len();
        let mut dq = vec![0.0; n];
        let mut dk = vec![0.0; n];
        let mut dv = vec![0.0; n];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * head_dim;
                let at = |pos: usize| {
                    let start = (b * seq + pos) * hidden + off;
                    start..start + head_dim
                };
                for i in 0..seq {
                    let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let go = &g[at(i)];
                    let mut dot = 0.0;
                    for j in 0..seq {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &vs[at(j)];
                        dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                        dot += p[j] * dp[j];
                        let dvj = &mut dv[at(j)];
                        dvj.iter_mut().zip(go).for_each(|(a, gi)| *a += p[j] * gi);
                    }
                    for j in 0..seq {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let (qi_r, kj_r) = (at(i), at(j));
                        for d in 0..head_dim {
                            dq[qi_r.start + d] += ds * ks[kj_r.start + d];
                            dk[kj_r.start + d] += ds * qs[qi_r.start + d];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.index].requires_grad {
                let gv = accumulate(grads, var.index, n);
                gv.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
            }
        }
    }
}
