//! Reverse-mode differentiation over small dense vectors.
//!
//! A [`Graph`] is a tape: every operation appends a node whose value lives in
//! one flat arena, so building and discarding a graph per batch costs a few
//! allocations regardless of node count. Trainable tensors live in a
//! [`ParamStore`]; [`Graph::param`] copies a parameter onto the tape and
//! [`Graph::backward`] adds `d root / d param` into the store's gradients.
//!
//! Matrices are passed as row-major flat vectors; their shape is inferred
//! from the operand lengths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lipschitz::spectral_norm_project;
use crate::tensor::Tensor;

/// Logits are clipped to this magnitude inside the cross-entropy op.
pub const LOGIT_CLIP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// When set, [`ParamStore::project`] keeps the spectral norm of the
    /// value (viewed as `rows x rest`) at or below this bound.
    pub lipschitz_bound: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, lipschitz_bound: Option<f64>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
            lipschitz_bound,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Applies the spectral-norm projection to every bounded parameter.
    pub fn project(&mut self) {
        for p in &mut self.params {
            if let Some(bound) = p.lipschitz_bound {
                p.value = spectral_norm_project(&p.value, bound);
            }
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    MatVec { m: usize, x: usize },
    Affine { m: usize, x: usize, b: usize },
    Outer(usize, usize),
    Transpose { m: usize, rows: usize },
    Tanh(usize),
    Sigmoid(usize),
    Dot(usize, usize),
    Sum(usize),
    Concat { start: usize, count: usize },
    Slice { a: usize, start: usize },
    BceLogits { logits: usize, targets: usize },
    WeightedSse { pred: usize, target: usize, weight: usize },
    /// Operands `[x, h, wz, bz, wr, br, wn, bn, un]` at `concat_inputs[start..]`;
    /// gates `z, r`, `U_n h` and candidate `n` at `saved[saved..]`.
    Gru { start: usize, saved: usize },
}

/// Parameter handles of one gated recurrent cell, as graph vars.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    /// Update gate, `h x (n + h)` over `[x; h]`.
    pub wz: Var,
    pub bz: Var,
    /// Reset gate, `h x (n + h)` over `[x; h]`.
    pub wr: Var,
    pub br: Var,
    pub wn: Var,
    pub bn: Var,
    pub un: Var,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::MatVec { .. } => "matvec",
            Op::Affine { .. } => "affine",
            Op::Outer(..) => "outer",
            Op::Transpose { .. } => "transpose",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Dot(..) => "dot",
            Op::Sum(_) => "sum",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::BceLogits { .. } => "bce_logits",
            Op::WeightedSse { .. } => "weighted_sse",
            Op::Gru { .. } => "gru",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    off: usize,
    len: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<f64>,
    concat_inputs: Vec<usize>,
    saved: Vec<f64>,
    poisoned: Option<(usize, &'static str)>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all nodes but keeps the allocated arenas.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.values.clear();
        self.concat_inputs.clear();
        self.saved.clear();
        self.poisoned = None;
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        &self.values[n.off..n.off + n.len]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].len
    }

    /// First op that produced a non-finite value, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.poisoned {
            None => Ok(()),
            Some((idx, op)) => Err(Error::numerical(op, format!("non-finite value at node {idx}"))),
        }
    }

    fn push(&mut self, op: Op, len: usize, fill: impl FnOnce(&[f64], &mut [f64])) -> Var {
        let off = self.values.len();
        self.values.resize(off + len, 0.0);
        let (src, dst) = self.values.split_at_mut(off);
        fill(src, dst);
        if self.poisoned.is_none() && dst.iter().any(|v| !v.is_finite()) {
            self.poisoned = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { op, off, len });
        Var(self.nodes.len() - 1)
    }

    fn span(&self, v: usize) -> (usize, usize) {
        let n = &self.nodes[v];
        (n.off, n.off + n.len)
    }

    pub fn constant(&mut self, data: &[f64]) -> Var {
        self.push(Op::Const, data.len(), |_, dst| dst.copy_from_slice(data))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(&[v])
    }

    pub fn zeros(&mut self, len: usize) -> Var {
        self.push(Op::Const, len, |_, _| {})
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let data = store.value(id).data();
        self.push(Op::Param(id), data.len(), |_, dst| dst.copy_from_slice(data))
    }

    fn binary_len(&self, a: Var, b: Var, op: &str) -> usize {
        let (la, lb) = (self.len_of(a), self.len_of(b));
        assert_eq!(la, lb, "{op}: operand lengths differ ({la} vs {lb})");
        la
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let len = self.binary_len(a, b, "add");
        let (sa, sb) = (self.span(a.0), self.span(b.0));
        self.push(Op::Add(a.0, b.0), len, |src, dst| {
            for ((d, x), y) in dst.iter_mut().zip(&src[sa.0..sa.1]).zip(&src[sb.0..sb.1]) {
                *d = x + y;
            }
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let len = self.binary_len(a, b, "sub");
        let (sa, sb) = (self.span(a.0), self.span(b.0));
        self.push(Op::Sub(a.0, b.0), len, |src, dst| {
            for ((d, x), y) in dst.iter_mut().zip(&src[sa.0..sa.1]).zip(&src[sb.0..sb.1]) {
                *d = x - y;
            }
        })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let len = self.binary_len(a, b, "mul");
        let (sa, sb) = (self.span(a.0), self.span(b.0));
        self.push(Op::Mul(a.0, b.0), len, |src, dst| {
            for ((d, x), y) in dst.iter_mut().zip(&src[sa.0..sa.1]).zip(&src[sb.0..sb.1]) {
                *d = x * y;
            }
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let sa = self.span(a.0);
        self.push(Op::Scale(a.0, c), sa.1 - sa.0, |src, dst| {
            for (d, x) in dst.iter_mut().zip(&src[sa.0..sa.1]) {
                *d = c * x;
            }
        })
    }

    /// `a * s` where `s` is a length-1 node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.len_of(s), 1, "scale_by: scale must be a scalar node");
        let sa = self.span(a.0);
        let so = self.nodes[s.0].off;
        self.push(Op::ScaleBy(a.0, s.0), sa.1 - sa.0, |src, dst| {
            let c = src[so];
            for (d, x) in dst.iter_mut().zip(&src[sa.0..sa.1]) {
                *d = c * x;
            }
        })
    }

    /// `m x` with `m` row-major of shape `(len(m)/len(x)) x len(x)`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Var {
        let cols = self.len_of(x);
        let lm = self.len_of(m);
        assert!(cols > 0 && lm % cols == 0, "matvec: {lm} not divisible by {cols}");
        let rows = lm / cols;
        let (sm, sx) = (self.span(m.0), self.span(x.0));
        self.push(Op::MatVec { m: m.0, x: x.0 }, rows, |src, dst| {
            let mv = &src[sm.0..sm.1];
            let xv = &src[sx.0..sx.1];
            for (i, d) in dst.iter_mut().enumerate() {
                *d = mv[i * cols..(i + 1) * cols].iter().zip(xv).map(|(a, b)| a * b).sum();
            }
        })
    }

    /// `m x + b`.
    pub fn affine(&mut self, m: Var, x: Var, b: Var) -> Var {
        let cols = self.len_of(x);
        let lm = self.len_of(m);
        assert!(cols > 0 && lm % cols == 0, "affine: {lm} not divisible by {cols}");
        let rows = lm / cols;
        assert_eq!(self.len_of(b), rows, "affine: bias length");
        let (sm, sx, sb) = (self.span(m.0), self.span(x.0), self.span(b.0));
        self.push(Op::Affine { m: m.0, x: x.0, b: b.0 }, rows, |src, dst| {
            let mv = &src[sm.0..sm.1];
            let xv = &src[sx.0..sx.1];
            let bv = &src[sb.0..sb.1];
            for (i, d) in dst.iter_mut().enumerate() {
                *d = bv[i] + mv[i * cols..(i + 1) * cols].iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
            }
        })
    }

    /// Row-major `a bᵀ`.
    pub fn outer(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.span(a.0), self.span(b.0));
        let (la, lb) = (sa.1 - sa.0, sb.1 - sb.0);
        self.push(Op::Outer(a.0, b.0), la * lb, |src, dst| {
            for i in 0..la {
                let ai = src[sa.0 + i];
                for j in 0..lb {
                    dst[i * lb + j] = ai * src[sb.0 + j];
                }
            }
        })
    }

    pub fn transpose(&mut self, m: Var, rows: usize) -> Var {
        let sm = self.span(m.0);
        let len = sm.1 - sm.0;
        assert!(rows > 0 && len % rows == 0, "transpose: bad row count");
        let cols = len / rows;
        self.push(Op::Transpose { m: m.0, rows }, len, |src, dst| {
            for i in 0..rows {
                for j in 0..cols {
                    dst[j * rows + i] = src[sm.0 + i * cols + j];
                }
            }
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let sa = self.span(a.0);
        self.push(Op::Tanh(a.0), sa.1 - sa.0, |src, dst| {
            for (d, x) in dst.iter_mut().zip(&src[sa.0..sa.1]) {
                *d = x.tanh();
            }
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let sa = self.span(a.0);
        self.push(Op::Sigmoid(a.0), sa.1 - sa.0, |src, dst| {
            for (d, x) in dst.iter_mut().zip(&src[sa.0..sa.1]) {
                *d = sigmoid(*x);
            }
        })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        self.binary_len(a, b, "dot");
        let (sa, sb) = (self.span(a.0), self.span(b.0));
        self.push(Op::Dot(a.0, b.0), 1, |src, dst| {
            dst[0] = src[sa.0..sa.1].iter().zip(&src[sb.0..sb.1]).map(|(x, y)| x * y).sum();
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let sa = self.span(a.0);
        self.push(Op::Sum(a.0), 1, |src, dst| {
            dst[0] = src[sa.0..sa.1].iter().sum();
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.len_of(a) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let start = self.concat_inputs.len();
        self.concat_inputs.extend(parts.iter().map(|v| v.0));
        let spans: Vec<(usize, usize)> = parts.iter().map(|v| self.span(v.0)).collect();
        let len = spans.iter().map(|s| s.1 - s.0).sum();
        self.push(
            Op::Concat {
                start,
                count: parts.len(),
            },
            len,
            |src, dst| {
                let mut o = 0;
                for s in &spans {
                    let n = s.1 - s.0;
                    dst[o..o + n].copy_from_slice(&src[s.0..s.1]);
                    o += n;
                }
            },
        )
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let sa = self.span(a.0);
        assert!(start + len <= sa.1 - sa.0, "slice out of range");
        self.push(Op::Slice { a: a.0, start }, len, |src, dst| {
            dst.copy_from_slice(&src[sa.0 + start..sa.0 + start + len]);
        })
    }

    /// Summed binary cross-entropy of `logits` against constant 0/1 targets.
    /// Logits are clipped to `±LOGIT_CLIP`; the clipped region has zero gradient.
    pub fn bce_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        assert_eq!(self.len_of(logits), targets.len(), "bce_logits: length mismatch");
        let t = self.constant(targets);
        let (sl, st) = (self.span(logits.0), self.span(t.0));
        self.push(Op::BceLogits { logits: logits.0, targets: t.0 }, 1, |src, dst| {
            dst[0] = src[sl.0..sl.1]
                .iter()
                .zip(&src[st.0..st.1])
                .map(|(&x, &y)| {
                    let x = x.clamp(-LOGIT_CLIP, LOGIT_CLIP);
                    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
                })
                .sum();
        })
    }

    /// `Σ w_k (pred_k - target_k)²` with constant targets and weights.
    pub fn weighted_sse(&mut self, pred: Var, target: &[f64], weight: &[f64]) -> Var {
        let n = self.len_of(pred);
        assert!(target.len() == n && weight.len() == n, "weighted_sse: length mismatch");
        let t = self.constant(target);
        let w = self.constant(weight);
        let (sp, st, sw) = (self.span(pred.0), self.span(t.0), self.span(w.0));
        self.push(
            Op::WeightedSse {
                pred: pred.0,
                target: t.0,
                weight: w.0,
            },
            1,
            |src, dst| {
                let mut acc = 0.0;
                for k in 0..n {
                    let e = src[sp.0 + k] - src[st.0 + k];
                    acc += src[sw.0 + k] * e * e;
                }
                dst[0] = acc;
            },
        )
    }

    /// Gated recurrent update
    /// `h' = n + z ∘ (h - n)`, `n = tanh(W_n x + b_n + r ∘ (U_n h))`,
    /// `z = σ(W_z [x; h] + b_z)`, `r = σ(W_r [x; h] + b_r)`.
    pub fn gru(&mut self, x: Var, h: Var, w: &GruWeights) -> Var {
        let (nx, nh) = (self.len_of(x), self.len_of(h));
        let operands = [x, h, w.wz, w.bz, w.wr, w.br, w.wn, w.bn, w.un];
        let expect = [nx, nh, nh * (nx + nh), nh, nh * (nx + nh), nh, nh * nx, nh, nh * nh];
        for (v, e) in operands.iter().zip(expect) {
            assert_eq!(self.len_of(*v), e, "gru: operand shape mismatch");
        }
        let start = self.concat_inputs.len();
        self.concat_inputs.extend(operands.iter().map(|v| v.0));
        let spans: Vec<(usize, usize)> = operands.iter().map(|v| self.span(v.0)).collect();
        let saved = self.saved.len();
        self.saved.resize(saved + 4 * nh, 0.0);
        let buf = &mut self.saved[saved..];
        let vals = &self.values;
        let get = |i: usize| &vals[spans[i].0..spans[i].1];
        let (xv, hv) = (get(0), get(1));
        let cat = nx + nh;
        let dot_xh = |m: &[f64], row: usize| -> f64 {
            let r = &m[row * cat..(row + 1) * cat];
            r[..nx].iter().zip(xv).map(|(a, b)| a * b).sum::<f64>() + r[nx..].iter().zip(hv).map(|(a, b)| a * b).sum::<f64>()
        };
        for i in 0..nh {
            let z = sigmoid(dot_xh(get(2), i) + get(3)[i]);
            let r = sigmoid(dot_xh(get(4), i) + get(5)[i]);
            let c: f64 = get(8)[i * nh..(i + 1) * nh].iter().zip(hv).map(|(a, b)| a * b).sum();
            let wx: f64 = get(6)[i * nx..(i + 1) * nx].iter().zip(xv).map(|(a, b)| a * b).sum();
            let n = (wx + get(7)[i] + r * c).tanh();
            buf[i] = z;
            buf[nh + i] = r;
            buf[2 * nh + i] = c;
            buf[3 * nh + i] = n;
        }
        let state = self.saved[saved..saved + 4 * nh].to_vec();
        self.push(Op::Gru { start, saved }, nh, |src, dst| {
            let hv = &src[spans[1].0..spans[1].1];
            for i in 0..nh {
                let (z, n) = (state[i], state[3 * nh + i]);
                dst[i] = n + z * (hv[i] - n);
            }
        })
    }

    /// Propagates `d root / d node` through the tape and adds the parameter
    /// gradients into `store`.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(root)?;
        for node in &self.nodes {
            if let Op::Param(id) = node.op {
                let g = &grads[node.off..node.off + node.len];
                for (acc, v) in store.get_mut(id).grad.data_mut().iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
        Ok(())
    }

    /// Gradient of `root` with respect to every node value, laid out like the
    /// value arena. Use [`Graph::grad_of`] to read one node's slice.
    pub fn gradients(&self, root: Var) -> Result<Vec<f64>> {
        let grads = self.backprop(root, false)?;
        if grads.iter().all(|g| g.is_finite()) {
            return Ok(grads);
        }
        self.backprop(root, true)?;
        Err(Error::numerical("backward", "non-finite gradient"))
    }

    /// Reverse sweep. With `check_each`, stops at the first node whose
    /// operand gradients become non-finite.
    fn backprop(&self, root: Var, check_each: bool) -> Result<Vec<f64>> {
        if self.len_of(root) != 1 {
            return Err(Error::contract(format!(
                "backward root must be a scalar, got length {}",
                self.len_of(root)
            )));
        }
        self.check_finite()?;
        let mut grads = vec![0.0; self.values.len()];
        grads[self.nodes[root.0].off] = 1.0;
        let v = &self.values;
        let mut operands = Vec::new();
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let (before, here) = grads.split_at_mut(node.off);
            let go = &here[..node.len];
            if go.iter().all(|&g| g == 0.0) {
                continue;
            }
            let span = |i: usize| {
                let n = &self.nodes[i];
                (n.off, n.off + n.len)
            };
            match node.op {
                Op::Const | Op::Param(_) => {}
                Op::Add(a, b) => {
                    let (sa, sb) = (span(a), span(b));
                    for k in 0..node.len {
                        before[sa.0 + k] += go[k];
                        before[sb.0 + k] += go[k];
                    }
                }
                Op::Sub(a, b) => {
                    let (sa, sb) = (span(a), span(b));
                    for k in 0..node.len {
                        before[sa.0 + k] += go[k];
                        before[sb.0 + k] -= go[k];
                    }
                }
                Op::Mul(a, b) => {
                    let (sa, sb) = (span(a), span(b));
                    for k in 0..node.len {
                        before[sa.0 + k] += go[k] * v[sb.0 + k];
                        before[sb.0 + k] += go[k] * v[sa.0 + k];
                    }
                }
                Op::Scale(a, c) => {
                    let sa = span(a);
                    for k in 0..node.len {
                        before[sa.0 + k] += c * go[k];
                    }
                }
                Op::ScaleBy(a, s) => {
                    let (sa, ss) = (span(a), span(s));
                    let c = v[ss.0];
                    let mut gs = 0.0;
                    for k in 0..node.len {
                        before[sa.0 + k] += c * go[k];
                        gs += go[k] * v[sa.0 + k];
                    }
                    before[ss.0] += gs;
                }
                Op::MatVec { m, x } => {
                    let (sm, sx) = (span(m), span(x));
                    matvec_backward(before, v, go, sm, sx);
                }
                Op::Affine { m, x, b } => {
                    let (sm, sx, sb) = (span(m), span(x), span(b));
                    axpy(&mut before[sb.0..sb.1], 1.0, go);
                    matvec_backward(before, v, go, sm, sx);
                }
                Op::Outer(a, b) => {
                    let (sa, sb) = (span(a), span(b));
                    let (la, lb) = (sa.1 - sa.0, sb.1 - sb.0);
                    for i in 0..la {
                        for j in 0..lb {
                            let g = go[i * lb + j];
                            before[sa.0 + i] += g * v[sb.0 + j];
                            before[sb.0 + j] += g * v[sa.0 + i];
                        }
                    }
                }
                Op::Transpose { m, rows } => {
                    let sm = span(m);
                    let cols = node.len / rows;
                    for i in 0..rows {
                        for j in 0..cols {
                            before[sm.0 + i * cols + j] += go[j * rows + i];
                        }
                    }
                }
                Op::Tanh(a) => {
                    let sa = span(a);
                    for k in 0..node.len {
                        let y = v[node.off + k];
                        before[sa.0 + k] += go[k] * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    let sa = span(a);
                    for k in 0..node.len {
                        let y = v[node.off + k];
                        before[sa.0 + k] += go[k] * y * (1.0 - y);
                    }
                }
                Op::Dot(a, b) => {
                    let (sa, sb) = (span(a), span(b));
                    let g = go[0];
                    for k in 0..sa.1 - sa.0 {
                        before[sa.0 + k] += g * v[sb.0 + k];
                        before[sb.0 + k] += g * v[sa.0 + k];
                    }
                }
                Op::Sum(a) => {
                    let sa = span(a);
                    let g = go[0];
                    for k in sa.0..sa.1 {
                        before[k] += g;
                    }
                }
                Op::Concat { start, count } => {
                    let mut o = 0;
                    for &input in &self.concat_inputs[start..start + count] {
                        let si = span(input);
                        for k in si.0..si.1 {
                            before[k] += go[o];
                            o += 1;
                        }
                    }
                }
                Op::Slice { a, start } => {
                    let sa = span(a);
                    for k in 0..node.len {
                        before[sa.0 + start + k] += go[k];
                    }
                }
                Op::BceLogits { logits, targets } => {
                    let (sl, st) = (span(logits), span(targets));
                    let g = go[0];
                    for k in 0..sl.1 - sl.0 {
                        let x = v[sl.0 + k];
                        if x.abs() < LOGIT_CLIP {
                            before[sl.0 + k] += g * (sigmoid(x) - v[st.0 + k]);
                        }
                    }
                }
                Op::WeightedSse { pred, target, weight } => {
                    let (sp, st, sw) = (span(pred), span(target), span(weight));
                    let g = go[0];
                    for k in 0..sp.1 - sp.0 {
                        before[sp.0 + k] += g * 2.0 * v[sw.0 + k] * (v[sp.0 + k] - v[st.0 + k]);
                    }
                }
                Op::Gru { start, saved } => {
                    let ops = &self.concat_inputs[start..start + 9];
                    let sp: Vec<(usize, usize)> = ops.iter().map(|&i| span(i)).collect();
                    let (nx, nh) = (sp[0].1 - sp[0].0, node.len);
                    let cat = nx + nh;
                    let st = &self.saved[saved..saved + 4 * nh];
                    let (x0, h0) = (sp[0].0, sp[1].0);
                    for i in 0..nh {
                        let (z, r, c, n) = (st[i], st[nh + i], st[2 * nh + i], st[3 * nh + i]);
                        let g = go[i];
                        let h = v[h0 + i];
                        before[h0 + i] += g * z;
                        let dn = g * (1.0 - z) * (1.0 - n * n);
                        let dz = g * (h - n) * z * (1.0 - z);
                        let dr = dn * c * r * (1.0 - r);
                        let dc = dn * r;
                        // candidate: W_n x + b_n + r ∘ (U_n h)
                        before[sp[7].0 + i] += dn;
                        let (xv, hv) = (&v[x0..x0 + nx], &v[h0..h0 + nh]);
                        let wn = sp[6].0 + i * nx;
                        axpy(&mut before[wn..wn + nx], dn, xv);
                        axpy(&mut before[x0..x0 + nx], dn, &v[wn..wn + nx]);
                        let un = sp[8].0 + i * nh;
                        axpy(&mut before[un..un + nh], dc, hv);
                        axpy(&mut before[h0..h0 + nh], dc, &v[un..un + nh]);
                        // gates over [x; h]
                        for (gate, w, b) in [(dz, sp[2].0, sp[3].0), (dr, sp[4].0, sp[5].0)] {
                            before[b + i] += gate;
                            let row = w + i * cat;
                            axpy(&mut before[row..row + nx], gate, xv);
                            axpy(&mut before[row + nx..row + cat], gate, hv);
                            axpy(&mut before[x0..x0 + nx], gate, &v[row..row + nx]);
                            axpy(&mut before[h0..h0 + nh], gate, &v[row + nx..row + cat]);
                        }
                    }
                }
            }
            if !check_each {
                continue;
            }
            operands.clear();
            self.operands(&node.op, &mut operands);
            let bad = operands.iter().any(|&i| {
                let (a, b) = span(i);
                before[a..b].iter().any(|g| !g.is_finite())
            });
            if bad {
                return Err(Error::numerical(
                    node.op.name(),
                    format!("non-finite gradient while differentiating node {idx}"),
                ));
            }
        }
        Ok(grads)
    }

    fn operands(&self, op: &Op, out: &mut Vec<usize>) {
        match *op {
            Op::Const | Op::Param(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ScaleBy(a, b) | Op::Outer(a, b) | Op::Dot(a, b) => {
                out.extend([a, b])
            }
            Op::MatVec { m, x } => out.extend([m, x]),
            Op::Affine { m, x, b } => out.extend([m, x, b]),
            Op::Scale(a, _) | Op::Tanh(a) | Op::Sigmoid(a) | Op::Sum(a) | Op::Slice { a, .. } => out.push(a),
            Op::Transpose { m, .. } => out.push(m),
            Op::Concat { start, count } => out.extend_from_slice(&self.concat_inputs[start..start + count]),
            Op::BceLogits { logits, .. } => out.push(logits),
            Op::WeightedSse { pred, .. } => out.push(pred),
            Op::Gru { start, .. } => out.extend_from_slice(&self.concat_inputs[start..start + 9]),
        }
    }

    /// Slice of a gradient vector returned by [`Graph::gradients`].
    pub fn grad_of<'a>(&self, grads: &'a [f64], v: Var) -> &'a [f64] {
        let n = &self.nodes[v.0];
        &grads[n.off..n.off + n.len]
    }
}


fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, xv) in dst.iter_mut().zip(x) {
        *d += a * xv;
    }
}

/// Accumulates the gradients of `m x` into a row-major `m` span and an `x` span.
fn matvec_backward(before: &mut [f64], v: &[f64], go: &[f64], sm: (usize, usize), sx: (usize, usize)) {
    let cols = sx.1 - sx.0;
    let x = &v[sx.0..sx.1];
    for (i, &gi) in go.iter().enumerate() {
        let row = sm.0 + i * cols;
        axpy(&mut before[row..row + cols], gi, x);
    }
    for (i, &gi) in go.iter().enumerate() {
        let row = sm.0 + i * cols;
        axpy(&mut before[sx.0..sx.1], gi, &v[row..row + cols]);
    }
}
