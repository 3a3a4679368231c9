//! A small reverse-mode automatic differentiation tape over [`Matrix`] values.
//!
//! The tape records only the operations the encoder and the two perceptrons
//! need. Multi-head attention, layer normalisation and row normalisation are
//! fused operations with hand-written backward passes, which keeps the tape
//! short and the inner loops cache friendly.

use crate::tensor::{gemm, Matrix};

/// A named collection of trainable tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// True when both sets hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.values
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect()
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// How the rows of a token matrix are grouped for attention.
///
/// Item `i` of group `g` lives at row `g * group_stride + i * item_stride`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupLayout {
    pub groups: usize,
    pub len: usize,
    pub group_stride: usize,
    pub item_stride: usize,
}

impl GroupLayout {
    #[inline]
    fn row(&self, g: usize, i: usize) -> usize {
        g * self.group_stride + i * self.item_stride
    }

    fn rows(&self) -> usize {
        self.groups * self.len
    }
}

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: GroupLayout,
        heads: usize,
        probs: Vec<f64>,
    },
    AddIndexed {
        x: Var,
        table: Var,
        index: Vec<usize>,
    },
    GroupMean {
        x: Var,
        group: usize,
    },
    MeanRows(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// The tape. Values are computed eagerly as nodes are pushed.
pub struct Graph {
    values: Vec<Matrix>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
    param_nodes: Vec<(ParamId, Var)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            requires_grad: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        Var(self.values.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.0]
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len()
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input, false)
    }

    /// A trainable leaf. Repeated requests for the same id share one node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_nodes.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(params.get(id).clone(), Op::Param, true);
        self.param_nodes.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].matmul(&self.values[b.0]);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// Adds a `1 × n` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = &self.values[bias.0];
        assert_eq!(b.rows(), 1, "bias must be a single row");
        assert_eq!(b.cols(), self.values[x.0].cols(), "bias width mismatch");
        let mut out = self.values[x.0].clone();
        let brow = b.row(0).to_vec();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&brow) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddBias(x, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.values[a.0].clone();
        out.add_scaled(&self.values[b.0], 1.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.values[x.0].clone();
        out.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.values[x.0].clone();
        out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Per-row layer normalisation with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = &self.values[x.0];
        let (rows, cols) = xv.shape();
        let g = self.values[gain.0].row(0);
        let b = self.values[bias.0].row(0);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xhat.get(r, c) * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q`, `k` and `v` are token matrices with `layout.rows()` rows; every
    /// group attends only within itself. Heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: GroupLayout, heads: usize) -> Var {
        let (qm, km, vm) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        let (rows, width) = qm.shape();
        assert_eq!(rows, layout.rows(), "attention layout does not cover the tokens");
        assert_eq!(km.shape(), qm.shape());
        assert_eq!(vm.shape(), qm.shape());
        assert_eq!(width % heads, 0, "width not divisible by heads");
        let d = width / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let l = layout.len;
        let mut probs = vec![0.0; layout.groups * heads * l * l];
        let mut out = Matrix::zeros(rows, width);
        let mut scores = vec![0.0; l];
        for g in 0..layout.groups {
            for h in 0..heads {
                let c0 = h * d;
                let pbase = (g * heads + h) * l * l;
                for i in 0..l {
                    let qi = &qm.row(layout.row(g, i))[c0..c0 + d];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &km.row(layout.row(g, j))[c0..c0 + d];
                        *s = crate::tensor::dot(qi, kj) * scale;
                        max = max.max(*s);
                    }
                    let mut sum = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let prow = &mut probs[pbase + i * l..pbase + (i + 1) * l];
                    for (p, s) in prow.iter_mut().zip(&scores) {
                        *p = s / sum;
                    }
                    let orow = layout.row(g, i);
                    for j in 0..l {
                        let p = probs[pbase + i * l + j];
                        let vj = &vm.row(layout.row(g, j))[c0..c0 + d];
                        let o = &mut out.row_mut(orow)[c0..c0 + d];
                        for (ov, vv) in o.iter_mut().zip(vj) {
                            *ov += p * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Row `r` of `x` gets row `index[r]` of `table` added to it.
    pub fn add_indexed(&mut self, x: Var, table: Var, index: Vec<usize>) -> Var {
        let mut out = self.values[x.0].clone();
        let t = &self.values[table.0];
        assert_eq!(index.len(), out.rows(), "index length mismatch");
        assert_eq!(t.cols(), out.cols(), "table width mismatch");
        for (r, &i) in index.iter().enumerate() {
            for (o, tv) in out.row_mut(r).iter_mut().zip(t.row(i)) {
                *o += tv;
            }
        }
        let rg = self.rg(x) || self.rg(table);
        self.push(out, Op::AddIndexed { x, table, index }, rg)
    }

    /// Averages consecutive blocks of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Var {
        let xv = &self.values[x.0];
        assert!(group > 0 && xv.rows() % group == 0, "rows not divisible by group");
        let n = xv.rows() / group;
        let mut out = Matrix::zeros(n, xv.cols());
        let inv = 1.0 / group as f64;
        for o in 0..n {
            for r in o * group..(o + 1) * group {
                for (a, b) in out.row_mut(o).iter_mut().zip(xv.row(r)) {
                    *a += b * inv;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::GroupMean { x, group }, rg)
    }

    /// Mean over all rows, as a `1 × cols` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        assert!(xv.rows() > 0, "mean of zero rows");
        let inv = 1.0 / xv.rows() as f64;
        let mut out = Matrix::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (a, b) in out.row_mut(0).iter_mut().zip(xv.row(r)) {
                *a += b * inv;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::MeanRows(x), rg)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.values[x.0].clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = crate::tensor::l2_norm(row).max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(out, Op::NormalizeRows { x, norms }, rg)
    }

    /// Runs the reverse pass from the given output gradients.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.values.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.values[v.0].shape(), "seed gradient shape mismatch");
            accumulate(&mut grads[v.0], g.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            if !self.requires_grad[idx] {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.ops[idx] {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                if self.rg(*a) {
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(1.0, dy, false, bv, true, 0.0, &mut da);
                    accumulate(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(1.0, av, true, dy, false, 0.0, &mut db);
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::AddBias(x, bias) => {
                if self.rg(*bias) {
                    let mut db = Matrix::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (a, b) in db.row_mut(0).iter_mut().zip(dy.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads[bias.0], db);
                }
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], dy.clone());
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], dy.clone());
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], dy.clone());
                }
            }
            Op::Gelu(x) => {
                let mut dx = dy.clone();
                for (d, xv) in dx.as_mut_slice().iter_mut().zip(self.values[x.0].as_slice()) {
                    *d *= gelu_grad(*xv);
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Relu(x) => {
                let mut dx = dy.clone();
                for (d, xv) in dx.as_mut_slice().iter_mut().zip(self.values[x.0].as_slice()) {
                    if *xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = dy.shape();
                let g = self.values[gain.0].row(0);
                if self.rg(*gain) {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.as_mut_slice()[c] += dy.get(r, c) * xhat.get(r, c);
                        }
                    }
                    accumulate(&mut grads[gain.0], dg);
                }
                if self.rg(*bias) {
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for (a, b) in db.row_mut(0).iter_mut().zip(dy.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads[bias.0], db);
                }
                if self.rg(*x) {
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    let mut dxh = vec![0.0; cols];
                    for r in 0..rows {
                        let xh = xhat.row(r);
                        let mut sum = 0.0;
                        let mut sum_xh = 0.0;
                        for c in 0..cols {
                            dxh[c] = dy.get(r, c) * g[c];
                            sum += dxh[c];
                            sum_xh += dxh[c] * xh[c];
                        }
                        let is = inv_std[r];
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = is / n * (n * dxh[c] - sum - xh[c] * sum_xh);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            } => {
                let (qm, km, vm) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
                let (rows, width) = qm.shape();
                let d = width / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let l = layout.len;
                let mut dq = Matrix::zeros(rows, width);
                let mut dk = Matrix::zeros(rows, width);
                let mut dv = Matrix::zeros(rows, width);
                let mut dp = vec![0.0; l];
                for g in 0..layout.groups {
                    for h in 0..*heads {
                        let c0 = h * d;
                        let pbase = (g * heads + h) * l * l;
                        for i in 0..l {
                            let ri = layout.row(g, i);
                            let doi = &dy.row(ri)[c0..c0 + d];
                            let prow = &probs[pbase + i * l..pbase + (i + 1) * l];
                            // dV_j += p_ij dO_i ; dP_ij = dO_i · V_j
                            let mut acc = 0.0;
                            for j in 0..l {
                                let rj = layout.row(g, j);
                                let vj = &vm.row(rj)[c0..c0 + d];
                                dp[j] = crate::tensor::dot(doi, vj);
                                acc += dp[j] * prow[j];
                                let p = prow[j];
                                let dvj = &mut dv.row_mut(rj)[c0..c0 + d];
                                for (a, b) in dvj.iter_mut().zip(doi) {
                                    *a += p * b;
                                }
                            }
                            // dS_ij = p_ij (dP_ij - Σ_k p_ik dP_ik)
                            let qi = qm.row(ri)[c0..c0 + d].to_vec();
                            for j in 0..l {
                                let ds = prow[j] * (dp[j] - acc) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let rj = layout.row(g, j);
                                {
                                    let kj = &km.row(rj)[c0..c0 + d];
                                    let dqi = &mut dq.row_mut(ri)[c0..c0 + d];
                                    for (a, b) in dqi.iter_mut().zip(kj) {
                                        *a += ds * b;
                                    }
                                }
                                let dkj = &mut dk.row_mut(rj)[c0..c0 + d];
                                for (a, b) in dkj.iter_mut().zip(&qi) {
                                    *a += ds * b;
                                }
                            }
                        }
                    }
                }
                if self.rg(*q) {
                    accumulate(&mut grads[q.0], dq);
                }
                if self.rg(*k) {
                    accumulate(&mut grads[k.0], dk);
                }
                if self.rg(*v) {
                    accumulate(&mut grads[v.0], dv);
                }
            }
            Op::AddIndexed { x, table, index } => {
                if self.rg(*table) {
                    let t = &self.values[table.0];
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &i) in index.iter().enumerate() {
                        for (a, b) in dt.row_mut(i).iter_mut().zip(dy.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads[table.0], dt);
                }
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], dy.clone());
                }
            }
            Op::GroupMean { x, group } => {
                let group = *group;
                let rows = self.values[x.0].rows();
                let mut dx = Matrix::zeros(rows, dy.cols());
                let inv = 1.0 / group as f64;
                for r in 0..rows {
                    let src = dy.row(r / group);
                    for (a, b) in dx.row_mut(r).iter_mut().zip(src) {
                        *a = b * inv;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::MeanRows(x) => {
                let rows = self.values[x.0].rows();
                let mut dx = Matrix::zeros(rows, dy.cols());
                let inv = 1.0 / rows as f64;
                for r in 0..rows {
                    for (a, b) in dx.row_mut(r).iter_mut().zip(dy.row(0)) {
                        *a = b * inv;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::NormalizeRows { x, norms } => {
                let y = &self.values[idx];
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for (r, n) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let dyr = dy.row(r);
                    let proj = crate::tensor::dot(yr, dyr);
                    for ((o, a), b) in dx.row_mut(r).iter_mut().zip(dyr).zip(yr) {
                        *o = (a - b * proj) / n;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => existing.add_scaled(&g, 1.0),
        None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Collects gradients for every tensor of `params`; unused tensors get zeros.
    pub fn param_grads(&self, graph: &Graph, params: &ParamSet) -> Vec<Matrix> {
        let mut out = params.zeros_like();
        for &(id, v) in &graph.param_nodes {
            if let Some(g) = &self.grads[v.0] {
                out[id.0] = g.clone();
            }
        }
        out
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Builds a scalar objective `Σ w ⊙ f(params)` and compares the tape's
    /// gradient to central differences.
    fn check<F>(params: &ParamSet, build: F)
    where
        F: Fn(&mut Graph, &ParamSet) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let out = build(&mut g, params);
        let shape = g.value(out).shape();
        let weights = Matrix::randn(shape.0, shape.1, 1.0, &mut rng);
        let grads = g.backward(&[(out, weights.clone())]);
        let analytic = grads.param_grads(&g, params);

        let objective = |p: &ParamSet| {
            let mut g = Graph::new();
            let out = build(&mut g, p);
            crate::tensor::dot(g.value(out).as_slice(), weights.as_slice())
        };
        let h = 1e-5;
        for t in 0..params.len() {
            let id = ParamId(t);
            for i in 0..params.get(id).len() {
                let mut plus = params.clone();
                plus.get_mut(id).as_mut_slice()[i] += h;
                let mut minus = params.clone();
                minus.get_mut(id).as_mut_slice()[i] -= h;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let a = analytic[t].as_slice()[i];
                let denom = a.abs().max(numeric.abs()).max(1e-7);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "{} [{i}]: analytic {a} vs numeric {numeric}",
                    params.name(id)
                );
            }
        }
    }

    #[test]
    fn linear_gelu_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        let x = p.add("x", Matrix::randn(4, 3, 1.0, &mut rng));
        let w = p.add("w", Matrix::randn(3, 5, 1.0, &mut rng));
        let b = p.add("b", Matrix::randn(1, 5, 1.0, &mut rng));
        let gn = p.add("gain", Matrix::randn(1, 5, 1.0, &mut rng));
        let bn = p.add("beta", Matrix::randn(1, 5, 1.0, &mut rng));
        check(&p, |g, p| {
            let xv = g.param(p, x);
            let wv = g.param(p, w);
            let bv = g.param(p, b);
            let h = g.linear(xv, wv, bv);
            let h = g.gelu(h);
            let (gv, bev) = (g.param(p, gn), g.param(p, bn));
            let h = g.layer_norm(h, gv, bev);
            let n = g.normalize_rows(h);
            g.mean_rows(n)
        });
    }

    #[test]
    fn attention_gradients_both_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamSet::new();
        let q = p.add("q", Matrix::randn(6, 4, 1.0, &mut rng));
        let k = p.add("k", Matrix::randn(6, 4, 1.0, &mut rng));
        let v = p.add("v", Matrix::randn(6, 4, 1.0, &mut rng));
        let pos = p.add("pos", Matrix::randn(3, 4, 1.0, &mut rng));
        // 2 frames x 3 joints, frame-major rows.
        let spatial = GroupLayout {
            groups: 2,
            len: 3,
            group_stride: 3,
            item_stride: 1,
        };
        let temporal = GroupLayout {
            groups: 3,
            len: 2,
            group_stride: 1,
            item_stride: 3,
        };
        check(&p, |g, p| {
            let (qv, kv, vv) = (g.param(p, q), g.param(p, k), g.param(p, v));
            let t = g.param(p, pos);
            let qv = g.add_indexed(qv, t, vec![0, 1, 2, 0, 1, 2]);
            let a = g.attention(qv, kv, vv, spatial, 2);
            let b = g.attention(a, a, vv, temporal, 1);
            let pooled = g.group_mean(b, 3);
            let r = g.relu(pooled);
            g.add(r, pooled)
        });
    }

    #[test]
    fn param_nodes_are_shared() {
        let mut p = ParamSet::new();
        let w = p.add("w", Matrix::filled(2, 2, 1.0));
        let mut g = Graph::new();
        let a = g.param(&p, w);
        let b = g.param(&p, w);
        assert_eq!(a, b);
        let s = g.add(a, b);
        let grads = g.backward(&[(s, Matrix::filled(2, 2, 1.0))]);
        assert_eq!(grads.param_grads(&g, &p)[0].as_slice(), &[2.0; 4]);
    }

    #[test]
    fn inputs_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Matrix::filled(1, 2, 3.0));
        let y = g.relu(x);
        let grads = g.backward(&[(y, Matrix::filled(1, 2, 1.0))]);
        assert!(grads.get(x).is_none());
    }
}
