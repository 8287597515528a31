//! Dense 2-D arrays and a reverse-mode gradient tape.
//!
//! Every operation on a [`Tape`] computes its value eagerly and records the
//! operands it needs for the reverse sweep. Parameters enter the tape through
//! [`Tape::param`], which also registers them for [`Tape::gradient`].

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor added to the variance in [`Tape::instance_norm`].
pub const NORM_EPS: f64 = 1e-5;

/// Row-major matrix of `f64`. Vectors are `1 x d` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Array {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "array",
                format!("{} values for shape [{rows}, {cols}]", data.len()),
            ));
        }
        Ok(Array { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Array {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Array {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Array {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Array::row_vector(vec![v])
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named parameter arrays in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    arrays: Vec<Array>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.arrays[id.0] = array;
            return id;
        }
        let id = ParamId(self.arrays.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.arrays.push(array);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.arrays[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.arrays.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array)> {
        self.names
            .iter()
            .zip(&self.arrays)
            .enumerate()
            .map(|(i, (n, a))| (ParamId(i), n.as_str(), a))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().all(Array::is_finite)
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    MeanRows(usize),
    Sum(usize),
    Pick(usize, usize, usize),
    InstanceNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    op: Op,
}

/// Parameter gradients keyed by [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Array>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// `self += scale * other`, entry by entry.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (id, g) in &other.map {
            let e = self
                .map
                .entry(*id)
                .or_insert_with(|| Array::zeros(g.rows, g.cols));
            for (a, b) in e.data.iter_mut().zip(&g.data) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn insert(&mut self, id: ParamId, g: Array) {
        self.map.insert(id, g);
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Array::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|a| a.data.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Drops every entry whose id fails `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        self.map.retain(|id, _| keep(*id));
    }
}

/// Single-use record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, usize)>,
    param_vars: HashMap<ParamId, Var>,
}

fn check(cond: bool, op: &'static str, detail: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::shape(op, detail()))
    }
}

fn matmul_into(a: &Array, b: &Array, out: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
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

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn constant(&mut self, a: Array) -> Var {
        self.push(a, Op::Leaf)
    }

    /// Puts parameter `id` on the tape, reusing the existing node if it was
    /// already registered.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.push((id, v.0));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check(av.cols == bv.rows, "matmul", || {
            format!("{:?} x {:?}", av.shape(), bv.shape())
        })?;
        let mut out = Array::zeros(av.rows, bv.cols);
        matmul_into(av, bv, &mut out.data);
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check(av.cols == bv.cols, "matmul_t", || {
            format!("{:?} x {:?}ᵀ", av.shape(), bv.shape())
        })?;
        let mut out = Array::zeros(av.rows, bv.rows);
        for i in 0..av.rows {
            for j in 0..bv.rows {
                out.data[i * bv.rows + j] = dot(av.row(i), bv.row(j));
            }
        }
        Ok(self.push(out, Op::MatMulT(a.0, b.0)))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check(av.shape() == bv.shape(), name, || {
            format!("{:?} vs {:?}", av.shape(), bv.shape())
        })?;
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        let out = Array {
            rows: av.rows,
            cols: av.cols,
            data,
        };
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Adds the `1 x d` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check(bv.rows == 1 && bv.cols == av.cols, "add_row", || {
            format!("{:?} + {:?}", av.shape(), bv.shape())
        })?;
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, x) in out.data[r * out.cols..(r + 1) * out.cols]
                .iter_mut()
                .zip(&bv.data)
            {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddRow(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v += s);
        self.push(out, Op::AddScalar(a.0))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), "concat_cols", || "no operands".into())?;
        let rows = self.value(parts[0]).rows;
        for p in parts {
            let r = self.value(*p).rows;
            check(r == rows, "concat_cols", || format!("rows {r} vs {rows}"))?;
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Array::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), "concat_rows", || "no operands".into())?;
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            check(pv.cols == cols, "concat_rows", || {
                format!("cols {} vs {cols}", pv.cols)
            })?;
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let out = Array { rows, cols, data };
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        check(start + len <= av.cols, "slice_cols", || {
            format!("[{start}, {}) of {} columns", start + len, av.cols)
        })?;
        let mut out = Array::zeros(av.rows, len);
        for r in 0..av.rows {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&av.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols(a.0, start)))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= av.rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of {}", av.rows),
            ));
        }
        let mut data = Vec::with_capacity(rows.len() * av.cols);
        for &r in rows {
            data.extend_from_slice(av.row(r));
        }
        let out = Array {
            rows: rows.len(),
            cols: av.cols,
            data,
        };
        Ok(self.push(out, Op::GatherRows(a.0, rows.to_vec())))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        self.push(out, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |v| v.max(0.0), Op::Relu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a.0))
    }

    /// Natural log; non-positive inputs are a contract error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data.iter().any(|&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Contract("log of a non-positive value".into()));
        }
        Ok(self.map(a, f64::ln, Op::Log(a.0)))
    }

    /// Row-wise softmax. With a mask, masked entries receive exactly zero
    /// probability and every row must keep at least one admissible entry.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let av = self.value(a);
        if let Some(m) = mask {
            check(m.len() == av.data.len(), "masked_softmax", || {
                format!("mask of {} for {:?}", m.len(), av.shape())
            })?;
        }
        let mut out = Array::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            let off = r * av.cols;
            let allowed = |c: usize| mask.is_none_or(|m| m[off + c]);
            // Masked logits behave like a -inf sentinel; the outputs are
            // zeroed explicitly rather than relying on exp underflow.
            let max = (0..av.cols)
                .filter(|&c| allowed(c))
                .map(|c| av.data[off + c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!(
                    "masked_softmax: row {r} has no admissible entry"
                )));
            }
            let mut total = 0.0;
            for c in 0..av.cols {
                if allowed(c) {
                    let e = (av.data[off + c] - max).exp();
                    out.data[off + c] = e;
                    total += e;
                }
            }
            out.data[off..off + av.cols]
                .iter_mut()
                .for_each(|v| *v /= total);
        }
        Ok(self.push(out, Op::Softmax(a.0)))
    }

    /// Mean over rows: `[n, d] -> [1, d]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Array::zeros(1, av.cols);
        for r in 0..av.rows {
            for (o, v) in out.data.iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / av.rows as f64;
        out.data.iter_mut().for_each(|v| *v *= inv);
        self.push(out, Op::MeanRows(a.0))
    }

    /// Sum of all entries as a `1 x 1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Array::scalar(s), Op::Sum(a.0))
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let av = self.value(a);
        check(r < av.rows && c < av.cols, "pick", || {
            format!("({r}, {c}) of {:?}", av.shape())
        })?;
        let v = av.get(r, c);
        Ok(self.push(Array::scalar(v), Op::Pick(a.0, r, c)))
    }

    /// Standardises each column over the rows, then applies the affine
    /// `gamma`, `beta` (both `1 x d`).
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        check(
            gv.shape() == [1, xv.cols] && bv.shape() == [1, xv.cols],
            "instance_norm",
            || format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
        )?;
        let (n, d) = (xv.rows, xv.cols);
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; d];
        let mut out = Array::zeros(n, d);
        for c in 0..d {
            let mean = (0..n).map(|r| xv.data[r * d + c]).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|r| (xv.data[r * d + c] - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[c] = is;
            for r in 0..n {
                let h = (xv.data[r * d + c] - mean) * is;
                xhat[r * d + c] = h;
                out.data[r * d + c] = h * gv.data[c] + bv.data[c];
            }
        }
        Ok(self.push(
            out,
            Op::InstanceNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        ))
    }

    /// Scaled dot-product attention of pre-projected queries `[m, d]` over
    /// keys and values `[n, d]`, split into `heads` column blocks. Returns
    /// the concatenated head outputs `[m, d]` before the output projection.
    pub fn attend(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let d = self.value(q).cols;
        check(
            heads > 0 && d.is_multiple_of(heads) && self.value(k).cols == d && self.value(v).cols == d,
            "attention",
            || format!("width {d} with {heads} heads"),
        )?;
        let dk = d / heads;
        let inv = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.slice_cols(q, h * dk, dk)?;
            let kh = self.slice_cols(k, h * dk, dk)?;
            let vh = self.slice_cols(v, h * dk, dk)?;
            let s = self.matmul_t(qh, kh)?;
            let s = self.scale(s, inv);
            let p = self.masked_softmax(s, None)?;
            outs.push(self.matmul(p, vh)?);
        }
        if heads == 1 {
            Ok(outs[0])
        } else {
            self.concat_cols(&outs)
        }
    }

    /// Multi-head attention with input projections `wq`, `wk`, `wv` and
    /// output projection `wo`.
    pub fn multi_head_attention(
        &mut self,
        query_in: Var,
        kv_in: Var,
        w: &AttentionVars,
        heads: usize,
    ) -> Result<Var> {
        let q = self.matmul(query_in, w.wq)?;
        let k = self.matmul(kv_in, w.wk)?;
        let v = self.matmul(kv_in, w.wv)?;
        let a = self.attend(q, k, v, heads)?;
        self.matmul(a, w.wo)
    }

    /// Reverse sweep from the scalar `output`; returns the gradient of every
    /// parameter registered on this tape.
    pub fn gradient(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != [1, 1] {
            return Err(Error::Contract(format!(
                "gradient of a non-scalar output {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut result = Gradients::default();
        for &(id, node) in &self.params {
            let v = &self.nodes[node].value;
            let g = match grads.get(node).and_then(|g| g.clone()) {
                Some(data) => Array {
                    rows: v.rows,
                    cols: v.cols,
                    data,
                },
                None => Array::zeros(v.rows, v.cols),
            };
            result.map.insert(id, g);
        }
        Ok(result)
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc(grads: &mut [Option<Vec<f64>>], j: usize, len: usize) -> &mut [f64] {
            grads[j].get_or_insert_with(|| vec![0.0; len])
        }
        let node = &self.nodes[i];
        let val = &node.value;
        let len = |j: usize| self.nodes[j].value.data.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (av.rows, av.cols, bv.cols);
                {
                    let ga = acc(grads, *a, len(*a));
                    for r in 0..m {
                        for p in 0..k {
                            ga[r * k + p] += dot(&g[r * n..(r + 1) * n], bv.row(p));
                        }
                    }
                }
                let gb = acc(grads, *b, len(*b));
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let av_rp = av.data[r * k + p];
                        if av_rp == 0.0 {
                            continue;
                        }
                        for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += av_rp * gv;
                        }
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, n, k) = (av.rows, bv.rows, av.cols);
                {
                    let ga = acc(grads, *a, len(*a));
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g[r * n + j];
                            for (o, bv) in ga[r * k..(r + 1) * k].iter_mut().zip(bv.row(j)) {
                                *o += gv * bv;
                            }
                        }
                    }
                }
                let gb = acc(grads, *b, len(*b));
                for r in 0..m {
                    for j in 0..n {
                        let gv = g[r * n + j];
                        for (o, av) in gb[j * k..(j + 1) * k].iter_mut().zip(av.row(r)) {
                            *o += gv * av;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for j in [*a, *b] {
                    acc(grads, j, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, v)| *o += v);
                }
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(o, v)| *o += v);
                acc(grads, *b, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(o, v)| *o -= v);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let ga = acc(grads, *a, g.len());
                for ((o, gv), bv) in ga.iter_mut().zip(g).zip(&bv.data) {
                    *o += gv * bv;
                }
                let gb = acc(grads, *b, g.len());
                for ((o, gv), av) in gb.iter_mut().zip(g).zip(&av.data) {
                    *o += gv * av;
                }
            }
            Op::AddRow(a, b) => {
                acc(grads, *a, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(o, v)| *o += v);
                let cols = val.cols;
                let gb = acc(grads, *b, cols);
                for r in 0..val.rows {
                    for (o, v) in gb.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *o += v;
                    }
                }
            }
            Op::Scale(a, s) => {
                acc(grads, *a, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(o, v)| *o += s * v);
            }
            Op::AddScalar(a) => {
                acc(grads, *a, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(o, v)| *o += v);
            }
            Op::ConcatCols(parts) => {
                let cols = val.cols;
                let mut off = 0;
                for &p in parts {
                    let pc = self.nodes[p].value.cols;
                    let gp = acc(grads, p, len(p));
                    for r in 0..val.rows {
                        for c in 0..pc {
                            gp[r * pc + c] += g[r * cols + off + c];
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let l = len(p);
                    acc(grads, p, l)
                        .iter_mut()
                        .zip(&g[off..off + l])
                        .for_each(|(o, v)| *o += v);
                    off += l;
                }
            }
            Op::SliceCols(a, start) => {
                let src_cols = self.nodes[*a].value.cols;
                let w = val.cols;
                let ga = acc(grads, *a, len(*a));
                for r in 0..val.rows {
                    for c in 0..w {
                        ga[r * src_cols + start + c] += g[r * w + c];
                    }
                }
            }
            Op::GatherRows(a, rows) => {
                let cols = val.cols;
                let ga = acc(grads, *a, len(*a));
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        ga[r * cols + c] += g[i * cols + c];
                    }
                }
            }
            Op::Tanh(a) => {
                let ga = acc(grads, *a, g.len());
                for ((o, gv), y) in ga.iter_mut().zip(g).zip(&val.data) {
                    *o += gv * (1.0 - y * y);
                }
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value.data;
                let ga = acc(grads, *a, g.len());
                for ((o, gv), x) in ga.iter_mut().zip(g).zip(x) {
                    if *x > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Exp(a) => {
                let ga = acc(grads, *a, g.len());
                for ((o, gv), y) in ga.iter_mut().zip(g).zip(&val.data) {
                    *o += gv * y;
                }
            }
            Op::Log(a) => {
                let x = &self.nodes[*a].value.data;
                let ga = acc(grads, *a, g.len());
                for ((o, gv), x) in ga.iter_mut().zip(g).zip(x) {
                    *o += gv / x;
                }
            }
            Op::Softmax(a) => {
                let cols = val.cols;
                let ga = acc(grads, *a, g.len());
                for r in 0..val.rows {
                    let y = val.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let inner = dot(y, gr);
                    for c in 0..cols {
                        ga[r * cols + c] += y[c] * (gr[c] - inner);
                    }
                }
            }
            Op::MeanRows(a) => {
                let src = &self.nodes[*a].value;
                let inv = 1.0 / src.rows as f64;
                let ga = acc(grads, *a, src.data.len());
                for r in 0..src.rows {
                    for c in 0..src.cols {
                        ga[r * src.cols + c] += g[c] * inv;
                    }
                }
            }
            Op::Sum(a) => {
                acc(grads, *a, len(*a)).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Pick(a, r, c) => {
                let cols = self.nodes[*a].value.cols;
                acc(grads, *a, len(*a))[r * cols + c] += g[0];
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = &self.nodes[*gamma].value.data;
                let (n, d) = (val.rows, val.cols);
                {
                    let gg = acc(grads, *gamma, d);
                    for r in 0..n {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                {
                    let gb = acc(grads, *beta, d);
                    for r in 0..n {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                }
                let gx = acc(grads, *x, n * d);
                let nf = n as f64;
                for c in 0..d {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for r in 0..n {
                        let dh = g[r * d + c] * gam[c];
                        s1 += dh;
                        s2 += dh * xhat[r * d + c];
                    }
                    for r in 0..n {
                        let dh = g[r * d + c] * gam[c];
                        gx[r * d + c] +=
                            inv_std[c] / nf * (nf * dh - s1 - xhat[r * d + c] * s2);
                    }
                }
            }
        }
    }
}

/// Tape handles for the four projections of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Relative error with an absolute floor, as used by the gradient checks:
/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
