//! Minimal reverse-mode automatic differentiation over `ndarray` matrices.
//!
//! Every value is a `[rows, cols]` f64 matrix (batch along rows). A `Tape`
//! records the forward computation; `backward` walks it in reverse and
//! returns gradients for every parameter leaf. The op set is exactly what
//! the sequence models need: GEMM, broadcasting adds/muls, gate
//! nonlinearities, softmax / log-sum-exp heads, embedding gathers and the
//! reductions for batched losses.
//!
//! Parameters live in a [`ParamStore`], tagged with an [`Owner`] partition
//! so whole model parts can be frozen or hashed at once.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::rc::Rc;

/// Which model part a parameter belongs to. The partition is fixed at
/// initialization and drives selective freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Encoder,
    Decoder,
    Estimator,
}

impl Owner {
    pub const ALL: [Owner; 3] = [Owner::Encoder, Owner::Decoder, Owner::Estimator];

    pub fn as_str(&self) -> &'static str {
        match self {
            Owner::Encoder => "encoder",
            Owner::Decoder => "decoder",
            Owner::Estimator => "estimator",
        }
    }
}

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub owner: Owner,
    pub value: Array2<f64>,
}

/// Named, owner-tagged trainable arrays plus the freeze state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    frozen: Vec<Owner>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, owner: Owner, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, owner, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_of(&self, owner: Owner) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entries[id.0].owner == owner).collect()
    }

    pub fn ids_of_any(&self, owners: &[Owner]) -> Vec<ParamId> {
        self.ids().filter(|&id| owners.contains(&self.entries[id.0].owner)).collect()
    }

    /// Marks exactly these partitions frozen.
    pub fn set_frozen(&mut self, owners: &[Owner]) {
        self.frozen = owners.to_vec();
    }

    pub fn is_frozen(&self, owner: Owner) -> bool {
        self.frozen.contains(&owner)
    }

    /// SHA-256 over (name, shape, little-endian values) of a partition,
    /// sorted by name. Bit-exact: any parameter change alters the hash.
    pub fn hash_partition(&self, owners: &[Owner]) -> String {
        use sha2::{Digest, Sha256};
        let mut entries: Vec<&ParamEntry> =
            self.entries.iter().filter(|e| owners.contains(&e.owner)).collect();
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        let mut hasher = Sha256::new();
        for e in entries {
            hasher.update(e.name.as_bytes());
            hasher.update((e.value.nrows() as u64).to_le_bytes());
            hasher.update((e.value.ncols() as u64).to_le_bytes());
            for &x in e.value.iter() {
                hasher.update(x.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    /// Total number of scalar parameters in a partition.
    pub fn count_scalars(&self, owners: &[Owner]) -> usize {
        self.entries
            .iter()
            .filter(|e| owners.contains(&e.owner))
            .map(|e| e.value.len())
            .sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    SelectCols(Var, Rc<Vec<usize>>),
    SumCols(Var),
    MeanRows(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every parameter leaf that was
/// touched on the tape.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.by_param.get(&id)
    }

    /// Global L2 norm over the given parameter subset.
    pub fn global_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|id| self.by_param.get(id))
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales every gradient so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, ids: &[ParamId], max_norm: f64) {
        let norm = self.global_norm(ids);
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for id in ids {
                if let Some(g) = self.by_param.get_mut(id) {
                    g.mapv_inplace(|x| x * scale);
                }
            }
        }
    }
}

/// A recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A parameter leaf; repeated requests return the same node. Parameters
    /// of a frozen partition come in as constants: no gradient is ever
    /// produced for them, though gradients still flow *through* ops that
    /// consume them.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = if store.is_frozen(store.entry(id).owner) {
            self.constant(store.get(id).clone())
        } else {
            self.push(store.get(id).clone(), Op::Param, true)
        };
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let value = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let value = self.value(a) - self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let value = self.value(a) * self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    /// `x [b,d] + row [1,d]`, broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        assert_eq!(self.value(x).ncols(), self.value(row).ncols());
        let value = self.value(x) + self.value(row);
        let needs = self.needs(x) || self.needs(row);
        self.push(value, Op::AddRow(x, row), needs)
    }

    /// `x [b,d] * col [b,1]`, broadcast over columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        assert_eq!(self.value(col).ncols(), 1);
        assert_eq!(self.value(x).nrows(), self.value(col).nrows());
        let value = self.value(x) * self.value(col);
        let needs = self.needs(x) || self.needs(col);
        self.push(value, Op::MulCol(x, col), needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).mapv(|v| v * c);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, c), needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).mapv(|v| v + c);
        let needs = self.needs(x);
        self.push(value, Op::AddScalar(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        let needs = self.needs(x);
        self.push(value, Op::Tanh(x), needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        let needs = self.needs(x);
        self.push(value, Op::Exp(x), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            let w = v.ncols();
            value.slice_mut(ndarray::s![.., at..at + w]).assign(v);
            at += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn slice_cols(&mut self, x: Var, lo: usize, hi: usize) -> Var {
        let value = self.value(x).slice(ndarray::s![.., lo..hi]).to_owned();
        let needs = self.needs(x);
        self.push(value, Op::SliceCols(x, lo, hi), needs)
    }

    /// Row-wise softmax (max-shifted for stability).
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let needs = self.needs(x);
        self.push(value, Op::SoftmaxRows(x), needs)
    }

    /// Row-wise log(sum(exp(x))) as a `[b,1]` column (max-shifted).
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut value = Array2::zeros((src.nrows(), 1));
        for (i, row) in src.rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            value[[i, 0]] = max + sum.ln();
        }
        let needs = self.needs(x);
        self.push(value, Op::LogSumExpRows(x), needs)
    }

    /// Embedding lookup: row i of the result is `table[indices[i]]`.
    pub fn gather_rows(&mut self, table: Var, indices: Rc<Vec<usize>>) -> Var {
        let t = self.value(table);
        let mut value = Array2::zeros((indices.len(), t.ncols()));
        for (i, &ix) in indices.iter().enumerate() {
            value.row_mut(i).assign(&t.row(ix));
        }
        let needs = self.needs(table);
        self.push(value, Op::GatherRows(table, indices), needs)
    }

    /// Per-row column pick: result `[b,1]` with `r[i,0] = x[i, indices[i]]`.
    pub fn select_cols(&mut self, x: Var, indices: Rc<Vec<usize>>) -> Var {
        let src = self.value(x);
        assert_eq!(src.nrows(), indices.len());
        let mut value = Array2::zeros((src.nrows(), 1));
        for (i, &ix) in indices.iter().enumerate() {
            value[[i, 0]] = src[[i, ix]];
        }
        let needs = self.needs(x);
        self.push(value, Op::SelectCols(x, indices), needs)
    }

    /// Row sums as a `[b,1]` column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        let needs = self.needs(x);
        self.push(value, Op::SumCols(x), needs)
    }

    /// Mean over rows of a `[b,1]` column, yielding `[1,1]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        assert_eq!(self.value(x).ncols(), 1);
        let mean = self.value(x).mean().unwrap();
        let needs = self.needs(x);
        self.push(Array2::from_elem((1, 1), mean), Op::MeanRows(x), needs)
    }

    /// Affine map `x * w + b` with `b` a `[1,out]` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    /// Reverse pass from a `[1,1]` loss node. Returns parameter gradients.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Constant | Op::Param => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let da = g.dot(&self.nodes[b.0].value.t());
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.needs(b) {
                        let db = self.nodes[a.0].value.t().dot(&g);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.needs(b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.needs(b) {
                        accumulate(&mut grads[b.0], -g);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        accumulate(&mut grads[a.0], &g * &self.nodes[b.0].value);
                    }
                    if self.needs(b) {
                        accumulate(&mut grads[b.0], &g * &self.nodes[a.0].value);
                    }
                }
                Op::AddRow(x, row) => {
                    let (x, row) = (*x, *row);
                    if self.needs(x) {
                        accumulate(&mut grads[x.0], g.clone());
                    }
                    if self.needs(row) {
                        let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[row.0], dr);
                    }
                }
                Op::MulCol(x, col) => {
                    let (x, col) = (*x, *col);
                    if self.needs(x) {
                        let c = &self.nodes[col.0].value;
                        accumulate(&mut grads[x.0], &g * c);
                    }
                    if self.needs(col) {
                        let dx = (&g * &self.nodes[x.0].value)
                            .sum_axis(Axis(1))
                            .insert_axis(Axis(1));
                        accumulate(&mut grads[col.0], dx);
                    }
                }
                Op::Scale(x, c) => {
                    let (x, c) = (*x, *c);
                    if self.needs(x) {
                        accumulate(&mut grads[x.0], g.mapv(|v| v * c));
                    }
                }
                Op::AddScalar(x) => {
                    let x = *x;
                    if self.needs(x) {
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    if self.needs(x) {
                        let y = &self.nodes[i].value;
                        let dx = &g * &(y * &(1.0 - y));
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Tanh(x) => {
                    let x = *x;
                    if self.needs(x) {
                        let y = &self.nodes[i].value;
                        let dx = &g * &(1.0 - y * y);
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Exp(x) => {
                    let x = *x;
                    if self.needs(x) {
                        let dx = &g * &self.nodes[i].value;
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        if self.needs(p) {
                            let slice = g.slice(ndarray::s![.., at..at + w]).to_owned();
                            accumulate(&mut grads[p.0], slice);
                        }
                        at += w;
                    }
                }
                Op::SliceCols(x, lo, hi) => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    if self.needs(x) {
                        let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                        dx.slice_mut(ndarray::s![.., lo..hi]).assign(&g);
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::SoftmaxRows(x) => {
                    let x = *x;
                    if self.needs(x) {
                        let y = &self.nodes[i].value;
                        let gy = &g * y;
                        let row_dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                        let dx = gy - y * &row_dot;
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::LogSumExpRows(x) => {
                    let x = *x;
                    if self.needs(x) {
                        let lse = &self.nodes[i].value;
                        let src = &self.nodes[x.0].value;
                        let mut dx = src.clone();
                        for (mut row, (&l, &gi)) in dx
                            .rows_mut()
                            .into_iter()
                            .zip(lse.iter().zip(g.iter()))
                        {
                            row.mapv_inplace(|v| (v - l).exp() * gi);
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::GatherRows(table, indices) => {
                    let (table, indices) = (*table, indices.clone());
                    if self.needs(table) {
                        let mut dt = Array2::zeros(self.nodes[table.0].value.dim());
                        for (i_row, &ix) in indices.iter().enumerate() {
                            let mut dst = dt.row_mut(ix);
                            dst += &g.row(i_row);
                        }
                        accumulate(&mut grads[table.0], dt);
                    }
                }
                Op::SelectCols(x, indices) => {
                    let (x, indices) = (*x, indices.clone());
                    if self.needs(x) {
                        let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                        for (i_row, &ix) in indices.iter().enumerate() {
                            dx[[i_row, ix]] += g[[i_row, 0]];
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::SumCols(x) => {
                    let x = *x;
                    if self.needs(x) {
                        let dim = self.nodes[x.0].value.dim();
                        let mut dx = Array2::zeros(dim);
                        for (mut row, &gi) in dx.rows_mut().into_iter().zip(g.iter()) {
                            row.fill(gi);
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::MeanRows(x) => {
                    let x = *x;
                    if self.needs(x) {
                        let rows = self.nodes[x.0].value.nrows();
                        let dx = Array2::from_elem((rows, 1), g[[0, 0]] / rows as f64);
                        accumulate(&mut grads[x.0], dx);
                    }
                }
            }
        }

        let mut out = Gradients::default();
        for (&id, &var) in &self.param_vars {
            if let Some(g) = grads[var.0].take() {
                out.by_param.insert(id, g);
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        None => *slot = Some(delta),
        Some(g) => *g += &delta,
    }
}

/// One LSTM cell's parameters bound onto a tape.
///
/// Gate layout along the 4h axis is (input, forget, cell, output); the
/// forget-gate bias is initialized to +1 at parameter creation.
pub struct LstmVars {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
    pub hidden: usize,
}

impl LstmVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore, wx: ParamId, wh: ParamId, b: ParamId) -> Self {
        let hidden = store.get(wh).nrows();
        LstmVars {
            wx: tape.param(store, wx),
            wh: tape.param(store, wh),
            b: tape.param(store, b),
            hidden,
        }
    }

    /// One step: returns the next (hidden, cell) state.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> (Var, Var) {
        let hd = self.hidden;
        let xw = tape.matmul(x, self.wx);
        let hw = tape.matmul(h, self.wh);
        let pre = tape.add(xw, hw);
        let gates = tape.add_row(pre, self.b);
        let i_raw = tape.slice_cols(gates, 0, hd);
        let f_raw = tape.slice_cols(gates, hd, 2 * hd);
        let g_raw = tape.slice_cols(gates, 2 * hd, 3 * hd);
        let o_raw = tape.slice_cols(gates, 3 * hd, 4 * hd);
        let i = tape.sigmoid(i_raw);
        let f = tape.sigmoid(f_raw);
        let g = tape.tanh(g_raw);
        let o = tape.sigmoid(o_raw);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_next = tape.add(fc, ig);
        let c_tanh = tape.tanh(c_next);
        let h_next = tape.mul(o, c_tanh);
        (h_next, c_next)
    }

    /// Masked step: rows with mask 0 keep their previous state, so the final
    /// state of each row is the state at its own last real step.
    pub fn masked_step(
        &self,
        tape: &mut Tape,
        x: Var,
        h: Var,
        c: Var,
        mask: Var,
        inv_mask: Var,
    ) -> (Var, Var) {
        let (h_new, c_new) = self.step(tape, x, h, c);
        let h_m = tape.mul_col(h_new, mask);
        let h_old = tape.mul_col(h, inv_mask);
        let h_next = tape.add(h_m, h_old);
        let c_m = tape.mul_col(c_new, mask);
        let c_old = tape.mul_col(c, inv_mask);
        let c_next = tape.add(c_m, c_old);
        (h_next, c_next)
    }
}

/// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
pub fn uniform_init(
    rng: &mut impl rand::Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
}
