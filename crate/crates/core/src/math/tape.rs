//! Reverse-mode autodiff on a per-forward tape.
//!
//! A [`Tape`] borrows a frozen [`ParamStore`] and records eagerly evaluated
//! ops. `backward` walks the record in reverse and accumulates gradients for
//! every parameter and `grad_input` leaf that was touched. Tapes are cheap,
//! thread-local, and rebuilt per forward pass; parameters are never copied
//! into the tape.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::math::tensor::{matmul, matmul_ta, matmul_tb, Tensor};

/// Boolean attention mask: rows are query positions, cols are key positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = vec![false; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                allowed[i * cols + j] = f(i, j);
            }
        }
        AttentionMask {
            rows,
            cols,
            allowed,
        }
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }

    /// Every query row must keep at least one key.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.rows {
            if !self.row(i).iter().any(|&a| a) {
                return Err(Error::AllMaskedRow(i));
            }
        }
        Ok(())
    }

    pub fn transposed(&self) -> Self {
        AttentionMask::from_fn(self.cols, self.rows, |i, j| self.allowed(j, i))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named parameter tensors, addressed by insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate param {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }
}

/// Per-parameter gradient accumulator, indexed like the store.
#[derive(Clone, Debug)]
pub struct Grads {
    pub by_slot: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn new(n_slots: usize) -> Self {
        Grads {
            by_slot: vec![None; n_slots],
        }
    }

    pub fn accumulate(&mut self, slot: usize, g: &[f64]) {
        match &mut self.by_slot[slot] {
            Some(buf) => {
                for (d, s) in buf.iter_mut().zip(g) {
                    *d += s;
                }
            }
            None => self.by_slot[slot] = Some(g.to_vec()),
        }
    }

    pub fn merge(&mut self, other: &Grads) {
        for (slot, g) in other.by_slot.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(slot, g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.by_slot.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_slot[id.0].as_deref()
    }

    pub fn all_finite(&self) -> bool {
        self.by_slot
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(usize),
    GradInput,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBroadcast(Var, Var),
    ScaleConst(Var, f64),
    MulConstTensor(Var, Arc<Tensor>),
    MulScalarVar(Var, Var),
    Matmul(Var, Var),
    MatmulTB(Var, Var),
    Transpose(Var),
    Gelu(Var),
    Exp(Var),
    ClampConst(Var, f64, f64),
    MaskedSoftmaxRows(Var, Arc<AttentionMask>),
    MaskedLseRows(Var, Arc<AttentionMask>),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, Var, Var, f64),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    L2NormalizeRows(Var),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Pick(Var, usize, usize),
    BceWithLogit(Var, f64),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>, // empty for Param nodes: resolved through the store
    op: Op,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].op {
            Op::Param(slot) => &self.store.get(ParamId(*slot)).data,
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "expected scalar");
        val[0]
    }

    fn rows(&self, v: Var) -> usize {
        match self.shape(v).len() {
            1 => 1,
            2 => self.shape(v)[0],
            _ => panic!("2-D op on shape {:?}", self.shape(v)),
        }
    }

    fn cols(&self, v: Var) -> usize {
        match self.shape(v).len() {
            1 => self.shape(v)[0],
            2 => self.shape(v)[1],
            _ => panic!("2-D op on shape {:?}", self.shape(v)),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(
            matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == value.len(),
            "shape/value mismatch"
        );
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    // ---- leaves ----

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Const)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.push(vec![1], vec![v], Op::Const)
    }

    /// A leaf whose gradient is retrievable after `backward` (used to stitch
    /// per-sample tapes to a batch-level loss tape).
    pub fn grad_input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::GradInput)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id.0) {
            return v;
        }
        let shape = self.store.get(id).shape.clone();
        let v = self.push(shape, Vec::new(), Op::Param(id.0));
        self.param_vars.insert(id.0, v);
        v
    }

    // ---- elementwise / scalar ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.shape(a).to_vec(), value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape");
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        self.push(self.shape(a).to_vec(), value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape");
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push(self.shape(a).to_vec(), value, Op::Mul(a, b))
    }

    /// `[m,n] + [n]` (or `[1,n]`), the bias pattern.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        assert_eq!(
            (self.rows(b), self.cols(b)),
            (1, n),
            "broadcast shape {:?} vs [{m},{n}]",
            self.shape(b)
        );
        let bv = self.value(b).to_vec();
        let mut value = self.value(a).to_vec();
        for i in 0..m {
            for j in 0..n {
                value[i * n + j] += bv[j];
            }
        }
        self.push(self.shape(a).to_vec(), value, Op::AddRowBroadcast(a, b))
    }

    pub fn scale_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), value, Op::ScaleConst(a, c))
    }

    pub fn mul_const_tensor(&mut self, a: Var, t: Arc<Tensor>) -> Var {
        assert_eq!(self.shape(a), &t.shape[..], "mul_const shape");
        let value = self.value(a).iter().zip(&t.data).map(|(x, y)| x * y).collect();
        self.push(self.shape(a).to_vec(), value, Op::MulConstTensor(a, t))
    }

    /// Multiply every element of `a` by the scalar variable `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scalar var");
        let sv = self.value(s)[0];
        let value = self.value(a).iter().map(|x| x * sv).collect();
        self.push(self.shape(a).to_vec(), value, Op::MulScalarVar(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(self.shape(a).to_vec(), value, Op::Exp(a))
    }

    pub fn clamp_const(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).iter().map(|x| x.clamp(lo, hi)).collect();
        self.push(self.shape(a).to_vec(), value, Op::ClampConst(a, lo, hi))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| gelu_val(x)).collect();
        self.push(self.shape(a).to_vec(), value, Op::Gelu(a))
    }

    // ---- matrix ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        assert_eq!(k, k2, "matmul inner dim");
        let value = matmul(self.value(a), self.value(b), m, k, n);
        self.push(vec![m, n], value, Op::Matmul(a, b))
    }

    /// `a · bᵀ` with `b` stored row-major `[n,k]`.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.rows(a), self.cols(a));
        let (n, k2) = (self.rows(b), self.cols(b));
        assert_eq!(k, k2, "matmul_tb inner dim");
        let value = matmul_tb(self.value(a), self.value(b), m, k, n);
        self.push(vec![m, n], value, Op::MatmulTB(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        let av = self.value(a);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = av[i * n + j];
            }
        }
        self.push(vec![n, m], value, Op::Transpose(a))
    }

    // ---- softmax family ----

    /// Row-wise softmax restricted to allowed keys. Disallowed keys get an
    /// exact 0.0 weight and never enter the max or the sum, so masked-out
    /// inputs cannot perturb allowed outputs even at the bit level.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Arc<AttentionMask>) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        assert_eq!((mask.rows, mask.cols), (m, n), "mask shape");
        let av = self.value(a);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mrow = mask.row(i);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if mrow[j] && row[j] > mx {
                    mx = row[j];
                }
            }
            let mut sum = 0.0;
            for j in 0..n {
                if mrow[j] {
                    let e = (row[j] - mx).exp();
                    value[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                if mrow[j] {
                    value[i * n + j] /= sum;
                }
            }
        }
        self.push(vec![m, n], value, Op::MaskedSoftmaxRows(a, mask))
    }

    /// Row-wise log-sum-exp over allowed entries, max-subtracted. Returns `[m]`.
    pub fn masked_lse_rows(&mut self, a: Var, mask: Arc<AttentionMask>) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        assert_eq!((mask.rows, mask.cols), (m, n), "mask shape");
        let av = self.value(a);
        let mut value = vec![0.0; m];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mrow = mask.row(i);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if mrow[j] && row[j] > mx {
                    mx = row[j];
                }
            }
            let mut sum = 0.0;
            for j in 0..n {
                if mrow[j] {
                    sum += (row[j] - mx).exp();
                }
            }
            value[i] = mx + sum.ln();
        }
        self.push(vec![m], value, Op::MaskedLseRows(a, mask))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        let av = self.value(a);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                value[i * n + j] = row[j] - lse;
            }
        }
        self.push(vec![m, n], value, Op::LogSoftmaxRows(a))
    }

    // ---- normalization / reductions ----

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = (self.rows(x), self.cols(x));
        assert_eq!(self.shape(gamma), [n]);
        assert_eq!(self.shape(beta), [n]);
        let xv = self.value(x);
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                value[i * n + j] = gv[j] * (row[j] - mu) * inv + bv[j];
            }
        }
        self.push(vec![m, n], value, Op::LayerNormRows(x, gamma, beta, eps))
    }

    /// Mean over rows: `[m,n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        let av = self.value(a);
        let mut value = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                value[j] += av[i * n + j];
            }
        }
        value.iter_mut().for_each(|v| *v /= m as f64);
        self.push(vec![n], value, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let len = self.value(a).len();
        let s = self.value(a).iter().sum::<f64>() / len as f64;
        self.push(vec![1], vec![s], Op::MeanAll(a))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        let av = self.value(a);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let nrm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let inv = if nrm > 0.0 { 1.0 / nrm } else { 1.0 };
            for j in 0..n {
                value[i * n + j] = row[j] * inv;
            }
        }
        self.push(self.shape(a).to_vec(), value, Op::L2NormalizeRows(a))
    }

    // ---- shape surgery ----

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        assert!(r0 < r1 && r1 <= m, "slice_rows range");
        let value = self.value(a)[r0 * n..r1 * n].to_vec();
        self.push(vec![r1 - r0, n], value, Op::SliceRows(a, r0, r1))
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        assert!(c0 < c1 && c1 <= n, "slice_cols range");
        let av = self.value(a);
        let w = c1 - c0;
        let mut value = vec![0.0; m * w];
        for i in 0..m {
            value[i * w..(i + 1) * w].copy_from_slice(&av[i * n + c0..i * n + c1]);
        }
        self.push(vec![m, w], value, Op::SliceCols(a, c0, c1))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.cols(parts[0]);
        let mut value = Vec::new();
        let mut m = 0;
        for &p in parts {
            assert_eq!(self.cols(p), n, "concat_rows width");
            m += self.rows(p);
            value.extend_from_slice(self.value(p));
        }
        self.push(vec![m, n], value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.rows(parts[0]);
        let widths: Vec<usize> = parts.iter().map(|&p| self.cols(p)).collect();
        let n: usize = widths.iter().sum();
        let mut value = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            assert_eq!(self.rows(p), m, "concat_cols height");
            let pv = self.value(p);
            for i in 0..m {
                value[i * n + off..i * n + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(vec![m, n], value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let n = self.cols(a);
        let v = self.value(a)[r * n + c];
        self.push(vec![1], vec![v], Op::Pick(a, r, c))
    }

    /// Numerically stable binary cross-entropy from a scalar logit against a
    /// constant target in [0,1].
    pub fn bce_with_logit(&mut self, logit: Var, target: f64) -> Var {
        assert_eq!(self.value(logit).len(), 1);
        let x = self.value(logit)[0];
        let v = x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
        self.push(vec![1], vec![v], Op::BceWithLogit(logit, target))
    }

    // ---- backward ----

    /// Reverse pass from seed gradients at the given nodes.
    pub fn backward(&self, seeds: &[(Var, Vec<f64>)]) -> Result<Backprop> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (v, seed) in seeds {
            let len = self.value(*v).len();
            if seed.len() != len {
                return Err(Error::Shape(format!(
                    "seed gradient has {} values, node has {len}",
                    seed.len()
                )));
            }
            match &mut grads[v.0] {
                Some(buf) => {
                    for (d, s) in buf.iter_mut().zip(seed) {
                        *d += s;
                    }
                }
                slot => *slot = Some(seed.clone()),
            }
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Backprop { grads })
    }

    /// Reverse pass from a scalar loss node (seed 1.0).
    pub fn backward_scalar(&self, loss: Var) -> Result<Backprop> {
        let lv = self.scalar_value(loss);
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("loss = {lv}")));
        }
        self.backward(&[(loss, vec![1.0])])
    }

    /// Fold parameter gradients from a finished backward pass into `grads`.
    pub fn param_grads_into(&self, bp: &Backprop, grads: &mut Grads) {
        let mut slots: Vec<(usize, Var)> = self.param_vars.iter().map(|(&s, &v)| (s, v)).collect();
        slots.sort_unstable_by_key(|(s, _)| *s);
        for (slot, var) in slots {
            if let Some(g) = bp.grad(var) {
                grads.accumulate(slot, g);
            }
        }
    }

    fn add_grad(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        match &mut grads[v.0] {
            Some(buf) => {
                for (d, s) in buf.iter_mut().zip(g) {
                    *d += s;
                }
            }
            slot => *slot = Some(g.to_vec()),
        }
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Const | Op::Param(_) | Op::GradInput => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g);
                self.add_grad(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.add_grad(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                self.add_grad(grads, *a, &ga);
                self.add_grad(grads, *b, &gb);
            }
            Op::AddRowBroadcast(a, b) => {
                self.add_grad(grads, *a, g);
                let n = self.cols(*b);
                let m = g.len() / n;
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += g[i * n + j];
                    }
                }
                self.add_grad(grads, *b, &gb);
            }
            Op::ScaleConst(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.add_grad(grads, *a, &ga);
            }
            Op::MulConstTensor(a, t) => {
                let ga: Vec<f64> = g.iter().zip(&t.data).map(|(x, y)| x * y).collect();
                self.add_grad(grads, *a, &ga);
            }
            Op::MulScalarVar(a, s) => {
                let sv = self.value(*s)[0];
                let ga: Vec<f64> = g.iter().map(|x| x * sv).collect();
                self.add_grad(grads, *a, &ga);
                let gs: f64 = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).sum();
                self.add_grad(grads, *s, &[gs]);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.cols(*b);
                let ga = matmul_tb(g, self.value(*b), m, n, k);
                let gb = matmul_ta(self.value(*a), g, m, k, n);
                self.add_grad(grads, *a, &ga);
                self.add_grad(grads, *b, &gb);
            }
            Op::MatmulTB(a, b) => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.rows(*b);
                let ga = matmul(g, self.value(*b), m, n, k);
                let gb = matmul_ta(g, self.value(*a), m, n, k);
                self.add_grad(grads, *a, &ga);
                self.add_grad(grads, *b, &gb);
            }
            Op::Transpose(a) => {
                let (m, n) = (self.rows(*a), self.cols(*a));
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                self.add_grad(grads, *a, &ga);
            }
            Op::Gelu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(gv, &x)| gv * gelu_grad(x))
                    .collect();
                self.add_grad(grads, *a, &ga);
            }
            Op::Exp(a) => {
                let ga: Vec<f64> = g.iter().zip(&node.value).map(|(gv, y)| gv * y).collect();
                self.add_grad(grads, *a, &ga);
            }
            Op::ClampConst(a, lo, hi) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(gv, &x)| if x > *lo && x < *hi { *gv } else { 0.0 })
                    .collect();
                self.add_grad(grads, *a, &ga);
            }
            Op::MaskedSoftmaxRows(a, mask) => {
                let (m, n) = (mask.rows, mask.cols);
                let y = &node.value;
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let mrow = mask.row(i);
                    let mut dotgy = 0.0;
                    for j in 0..n {
                        if mrow[j] {
                            dotgy += g[i * n + j] * y[i * n + j];
                        }
                    }
                    for j in 0..n {
                        if mrow[j] {
                            ga[i * n + j] = y[i * n + j] * (g[i * n + j] - dotgy);
                        }
                    }
                }
                self.add_grad(grads, *a, &ga);
            }
            Op::MaskedLseRows(a, mask) => {
                let (m, n) = (mask.rows, mask.cols);
                let av = self.value(*a);
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let mrow = mask.row(i);
                    let lse = node.value[i];
                    for j in 0..n {
                        if mrow[j] {
                            ga[i * n + j] = g[i] * (av[i * n + j] - lse).exp();
                        }
                    }
                }
                self.add_grad(grads, *a, &ga);
            }
            Op::LogSoftmaxRows(a) => {
                let (m, n) = (self.rows(*a), self.cols(*a));
                let y = &node.value;
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let gsum: f64 = g[i * n..(i + 1) * n].iter().sum();
                    for j in 0..n {
                        ga[i * n + j] = g[i * n + j] - y[i * n + j].exp() * gsum;
                    }
                }
                self.add_grad(grads, *a, &ga);
            }
            Op::LayerNormRows(x, gamma, beta, eps) => {
                let (m, n) = (self.rows(*x), self.cols(*x));
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let mut gx = vec![0.0; m * n];
                let mut ggamma = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let mu = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|x| (x - mu) * inv).collect();
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    for j in 0..n {
                        let gg = grow[j] * gv[j];
                        mean_gg += gg;
                        mean_ggx += gg * xhat[j];
                        ggamma[j] += grow[j] * xhat[j];
                        gbeta[j] += grow[j];
                    }
                    mean_gg /= n as f64;
                    mean_ggx /= n as f64;
                    for j in 0..n {
                        let gg = grow[j] * gv[j];
                        gx[i * n + j] = inv * (gg - mean_gg - xhat[j] * mean_ggx);
                    }
                }
                self.add_grad(grads, *x, &gx);
                self.add_grad(grads, *gamma, &ggamma);
                self.add_grad(grads, *beta, &gbeta);
            }
            Op::MeanRows(a) => {
                let (m, n) = (self.rows(*a), self.cols(*a));
                let inv = 1.0 / m as f64;
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j] * inv;
                    }
                }
                self.add_grad(grads, *a, &ga);
            }
            Op::SumAll(a) => {
                let ga = vec![g[0]; self.value(*a).len()];
                self.add_grad(grads, *a, &ga);
            }
            Op::MeanAll(a) => {
                let len = self.value(*a).len();
                let ga = vec![g[0] / len as f64; len];
                self.add_grad(grads, *a, &ga);
            }
            Op::L2NormalizeRows(a) => {
                let (m, n) = (self.rows(*a), self.cols(*a));
                let xv = self.value(*a);
                let y = &node.value;
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let yrow = &y[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let nrm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if nrm > 0.0 {
                        let gy: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga[i * n + j] = (grow[j] - yrow[j] * gy) / nrm;
                        }
                    } else {
                        ga[i * n..(i + 1) * n].copy_from_slice(grow);
                    }
                }
                self.add_grad(grads, *a, &ga);
            }
            Op::SliceRows(a, r0, r1) => {
                let n = self.cols(*a);
                let m = self.rows(*a);
                let mut ga = vec![0.0; m * n];
                ga[r0 * n..r1 * n].copy_from_slice(g);
                self.add_grad(grads, *a, &ga);
            }
            Op::SliceCols(a, c0, c1) => {
                let (m, n) = (self.rows(*a), self.cols(*a));
                let w = c1 - c0;
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    ga[i * n + c0..i * n + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.add_grad(grads, *a, &ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.add_grad(grads, p, &g[off..off + len]);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.rows(parts[0]);
                let n: usize = parts.iter().map(|&p| self.cols(p)).sum();
                let mut off = 0;
                for &p in parts {
                    let w = self.cols(p);
                    let mut gp = vec![0.0; m * w];
                    for i in 0..m {
                        gp[i * w..(i + 1) * w].copy_from_slice(&g[i * n + off..i * n + off + w]);
                    }
                    self.add_grad(grads, p, &gp);
                    off += w;
                }
            }
            Op::Pick(a, r, c) => {
                let n = self.cols(*a);
                let mut ga = vec![0.0; self.value(*a).len()];
                ga[r * n + c] = g[0];
                self.add_grad(grads, *a, &ga);
            }
            Op::BceWithLogit(a, target) => {
                let x = self.value(*a)[0];
                let sig = 1.0 / (1.0 + (-x).exp());
                self.add_grad(grads, *a, &[g[0] * (sig - target)]);
            }
        }
    }
}

pub struct Backprop {
    grads: Vec<Option<Vec<f64>>>,
}

impl Backprop {
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(pairs: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in pairs {
            s.add(n, t.clone());
        }
        s
    }

    /// Central finite differences over every coordinate of every param.
    fn fd_check(
        store: &mut ParamStore,
        f: impl Fn(&mut Tape) -> Var,
        tol: f64,
    ) {
        let (loss0, analytic) = {
            let mut tape = Tape::new(store);
            let loss = f(&mut tape);
            let bp = tape.backward_scalar(loss).unwrap();
            let mut grads = Grads::new(store.len());
            tape.param_grads_into(&bp, &mut grads);
            (tape.scalar_value(loss), grads)
        };
        assert!(loss0.is_finite());
        let eps = 1e-6;
        for slot in 0..store.len() {
            for i in 0..store.get(ParamId(slot)).len() {
                let orig = store.get(ParamId(slot)).data[i];
                store.get_mut(ParamId(slot)).data[i] = orig + eps;
                let lp = {
                    let mut tape = Tape::new(store);
                    let loss = f(&mut tape);
                    tape.scalar_value(loss)
                };
                store.get_mut(ParamId(slot)).data[i] = orig - eps;
                let lm = {
                    let mut tape = Tape::new(store);
                    let loss = f(&mut tape);
                    tape.scalar_value(loss)
                };
                store.get_mut(ParamId(slot)).data[i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let a = analytic
                    .get(ParamId(slot))
                    .map(|g| g[i])
                    .unwrap_or(0.0);
                let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-12);
                assert!(
                    rel < tol,
                    "slot {slot} coord {i}: analytic {a} vs fd {fd} (rel {rel})"
                );
            }
        }
    }

    fn seeded(shape: Vec<usize>, seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let data = (0..n)
            .map(|_| {
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                ((x >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_chain_grad() {
        let mut store = store_with(&[
            ("a", seeded(vec![3, 4], 1)),
            ("b", seeded(vec![4, 5], 2)),
            ("c", seeded(vec![3, 5], 3)),
        ]);
        fd_check(
            &mut store,
            |t| {
                let a = t.param(ParamId(0));
                let b = t.param(ParamId(1));
                let c = t.param(ParamId(2));
                let ab = t.matmul(a, b);
                let m = t.mul(ab, c);
                let s = t.sum_all(m);
                t.gelu(s)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_tb_and_transpose_grad() {
        let mut store = store_with(&[
            ("a", seeded(vec![3, 4], 4)),
            ("b", seeded(vec![5, 4], 5)),
        ]);
        fd_check(
            &mut store,
            |t| {
                let a = t.param(ParamId(0));
                let b = t.param(ParamId(1));
                let ab = t.matmul_tb(a, b); // 3x5
                let tr = t.transpose(ab); // 5x3
                let sm = t.log_softmax_rows(tr);
                t.mean_all(sm)
            },
            1e-6,
        );
    }

    #[test]
    fn masked_softmax_and_lse_grad() {
        let mask = Arc::new(AttentionMask::from_fn(4, 4, |i, j| j <= i));
        let mut store = store_with(&[("x", seeded(vec![4, 4], 7))]);
        let m1 = mask.clone();
        fd_check(
            &mut store,
            move |t| {
                let x = t.param(ParamId(0));
                let sm = t.masked_softmax_rows(x, m1.clone());
                let lse = t.masked_lse_rows(sm, m1.clone());
                t.mean_all(lse)
            },
            1e-5,
        );
    }

    #[test]
    fn layer_norm_and_l2_normalize_grad() {
        let mut store = store_with(&[
            ("x", seeded(vec![3, 6], 9)),
            ("g", seeded(vec![6], 10)),
            ("b", seeded(vec![6], 11)),
        ]);
        fd_check(
            &mut store,
            |t| {
                let x = t.param(ParamId(0));
                let g = t.param(ParamId(1));
                let b = t.param(ParamId(2));
                let ln = t.layer_norm_rows(x, g, b, 1e-5);
                let nn = t.l2_normalize_rows(ln);
                let mr = t.mean_rows(nn);
                let s = t.sum_all(mr);
                let e = t.exp(s);
                t.scale_const(e, 0.25)
            },
            1e-5,
        );
    }

    #[test]
    fn slice_concat_pick_grad() {
        let mut store = store_with(&[("x", seeded(vec![4, 6], 13))]);
        fd_check(
            &mut store,
            |t| {
                let x = t.param(ParamId(0));
                let top = t.slice_rows(x, 0, 2);
                let bottom = t.slice_rows(x, 2, 4);
                let joined = t.concat_rows(&[bottom, top]);
                let left = t.slice_cols(joined, 0, 3);
                let right = t.slice_cols(joined, 3, 6);
                let wide = t.concat_cols(&[right, left]);
                let p = t.pick(wide, 1, 4);
                let q = t.pick(wide, 3, 0);
                let s = t.add(p, q);
                t.gelu(s)
            },
            1e-6,
        );
    }

    #[test]
    fn scalar_ops_grad() {
        let mut store = store_with(&[("x", seeded(vec![2, 3], 17)), ("s", Tensor::scalar(0.3))]);
        fd_check(
            &mut store,
            |t| {
                let x = t.param(ParamId(0));
                let s = t.param(ParamId(1));
                let e = t.exp(s);
                let c = t.clamp_const(e, 0.5, 10.0);
                let sx = t.mul_scalar_var(x, c);
                let b = t.constant(&Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap());
                let y = t.add_row_broadcast(sx, b);
                let m = t.mean_all(y);
                t.bce_with_logit(m, 0.7)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_input_receives_gradient() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.grad_input(&Tensor::new(vec![2], vec![2.0, 3.0]).unwrap());
        let y = tape.mul(x, x);
        let s = tape.sum_all(y);
        let bp = tape.backward_scalar(s).unwrap();
        assert_eq!(bp.grad(x).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn shared_param_node_accumulates() {
        // f(w) = sum(w*w) through two param() calls hitting the same node
        let mut store = store_with(&[("w", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap())]);
        let (g0, g1) = {
            let mut tape = Tape::new(&store);
            let a = tape.param(ParamId(0));
            let b = tape.param(ParamId(0));
            assert_eq!(a, b);
            let y = tape.mul(a, b);
            let s = tape.sum_all(y);
            let bp = tape.backward_scalar(s).unwrap();
            let mut grads = Grads::new(store.len());
            tape.param_grads_into(&bp, &mut grads);
            let g = grads.get(ParamId(0)).unwrap();
            (g[0], g[1])
        };
        assert!((g0 - 3.0).abs() < 1e-12);
        assert!((g1 + 4.0).abs() < 1e-12);
    }

    #[test]
    fn all_masked_row_rejected() {
        let m = AttentionMask::from_fn(2, 2, |i, _| i == 0);
        assert!(matches!(m.validate(), Err(Error::AllMaskedRow(1))));
        assert!(AttentionMask::full(2, 2).validate().is_ok());
    }
}
