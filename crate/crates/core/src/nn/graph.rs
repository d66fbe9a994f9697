//! Tape-based reverse-mode autodiff over 2-D tensors.
//!
//! A [`Graph`] records one forward pass. Parameters are copied onto the tape
//! from a [`ParamStore`] and [`Graph::backward`] accumulates their gradients
//! back into it. Nodes that depend on no trainable parameter are skipped in
//! the backward sweep, so frozen sub-networks cost nothing there.

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::spatial::Interpolation;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Variable-size groups of row indices in CSR layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Groups {
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Groups {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut indices = Vec::new();
        for l in lists {
            indices.extend_from_slice(l);
            offsets.push(indices.len());
        }
        Self { offsets, indices }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn group(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Elu(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Interp(Var, Arc<Interpolation<T>>),
    MaxPool { x: Var, argmax: Vec<usize> },
    Gat(Box<GatCache<T>>),
    CrossEntropy { logits: Var, labels: Arc<Vec<usize>>, probs: Tensor<T> },
}

struct GatCache<T> {
    h: Var,
    a_self: Var,
    a_nbr: Var,
    heads: usize,
    adj: Arc<Groups>,
    /// Attention per (adjacency entry, head), aligned with `adj.indices`.
    alpha: Vec<T>,
    /// Pre-activation score per (adjacency entry, head).
    score: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, k] = self.shape(a);
        let [k2, m] = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let mut out = Tensor::zeros(n, m);
        T::gemm(n, k, m, T::one(), self.value(a).data(), false, self.value(b).data(), false, T::zero(), out.data_mut());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Adds the `1×m` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let [_, m] = self.shape(x);
        if self.shape(b) != [1, m] {
            return Err(Error::Shape(format!("bias {:?} for width {m}", self.shape(b))));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddRow(x, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("add {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// `x` for positive entries, `exp(x) - 1` otherwise.
    pub fn elu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| {
            if *v <= T::zero() {
                *v = v.exp_m1();
            }
        });
        let ng = self.ng(x);
        self.push(out, Op::Elu(x), ng)
    }

    /// Column-wise concatenation of equally tall tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p)[0]).ok_or_else(|| Error::Shape("empty concat".into()))?;
        if parts.iter().any(|&p| self.shape(p)[0] != rows) {
            return Err(Error::Shape("concat of tensors with different row counts".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let v = self.value(p);
            let w = v.cols();
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + w].copy_from_slice(v.row(r));
            }
            c0 += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Row `i` of the result is `Σ w · x[j]` over the plan's row `i`.
    pub fn interp(&mut self, x: Var, plan: Arc<Interpolation<T>>) -> Result<Var> {
        let src = self.value(x);
        let d = src.cols();
        if plan.indices.iter().any(|&j| j >= src.rows()) {
            return Err(Error::Shape("interpolation index out of range".into()));
        }
        let mut out = Tensor::zeros(plan.rows(), d);
        for r in 0..plan.rows() {
            let (ids, ws) = plan.row(r);
            let o = out.row_mut(r);
            for (&j, &w) in ids.iter().zip(ws) {
                for (ov, &sv) in o.iter_mut().zip(src.row(j)) {
                    *ov += w * sv;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Interp(x, plan), ng))
    }

    /// Column-wise max of each group of rows. Ties route the gradient to the
    /// smallest row index.
    pub fn max_pool(&mut self, x: Var, groups: &Groups) -> Result<Var> {
        let src = self.value(x);
        let d = src.cols();
        let mut out = Tensor::zeros(groups.len(), d);
        let mut argmax = vec![0usize; groups.len() * d];
        for g in 0..groups.len() {
            let members = groups.group(g);
            if members.is_empty() {
                return Err(Error::EmptyPointSet);
            }
            if members.iter().any(|&j| j >= src.rows()) {
                return Err(Error::Shape("pool index out of range".into()));
            }
            for c in 0..d {
                let mut best = members[0];
                for &j in &members[1..] {
                    let (v, b) = (src.at(j, c), src.at(best, c));
                    if v > b || (v == b && j < best) {
                        best = j;
                    }
                }
                argmax[g * d + c] = best;
                out.row_mut(g)[c] = src.at(best, c);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, ng))
    }

    /// Multi-head graph attention on pre-transformed features `h` (`N×H·F`).
    ///
    /// For head `k`, `e_ij = LeakyReLU(a_self·h_i + a_nbr·h_j)` over the
    /// neighbours `j` of `i` (which must include `i`), `α_i = softmax(e_i)`,
    /// and the output is `Σ_j α_ij h_j`. `a_self` and `a_nbr` are `1×H·F`.
    pub fn gat(&mut self, h: Var, a_self: Var, a_nbr: Var, heads: usize, adj: Arc<Groups>) -> Result<Var> {
        let [n, hf] = self.shape(h);
        if heads == 0 || hf % heads != 0 {
            return Err(Error::Shape(format!("width {hf} not divisible into {heads} heads")));
        }
        if self.shape(a_self) != [1, hf] || self.shape(a_nbr) != [1, hf] {
            return Err(Error::Shape("attention vector width".into()));
        }
        if adj.len() != n {
            return Err(Error::Shape(format!("adjacency for {} nodes, features for {n}", adj.len())));
        }
        for i in 0..n {
            let g = adj.group(i);
            if g.iter().any(|&j| j >= n) {
                return Err(Error::Shape("adjacency index out of range".into()));
            }
            if !g.contains(&i) {
                return Err(Error::MissingSelfLoop(i));
            }
        }
        let f = hf / heads;
        let hv = self.value(h);
        let (asv, anv) = (self.value(a_self).data(), self.value(a_nbr).data());
        // Per-node, per-head projections.
        let mut s = vec![T::zero(); n * heads];
        let mut t = vec![T::zero(); n * heads];
        for i in 0..n {
            let row = hv.row(i);
            for k in 0..heads {
                let sl = k * f..(k + 1) * f;
                s[i * heads + k] = row[sl.clone()].iter().zip(&asv[sl.clone()]).map(|(&a, &b)| a * b).sum();
                t[i * heads + k] = row[sl.clone()].iter().zip(&anv[sl]).map(|(&a, &b)| a * b).sum();
            }
        }
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let nnz = adj.indices.len();
        let mut alpha = vec![T::zero(); nnz * heads];
        let mut score = vec![T::zero(); nnz * heads];
        let mut out = Tensor::zeros(n, hf);
        for i in 0..n {
            let (lo, hi) = (adj.offsets[i], adj.offsets[i + 1]);
            for k in 0..heads {
                let mut mx = T::neg_infinity();
                for e in lo..hi {
                    let z = s[i * heads + k] + t[adj.indices[e] * heads + k];
                    score[e * heads + k] = z;
                    let lz = if z > T::zero() { z } else { z * slope };
                    mx = mx.max(lz);
                    alpha[e * heads + k] = lz;
                }
                let mut total = T::zero();
                for e in lo..hi {
                    let v = (alpha[e * heads + k] - mx).exp();
                    alpha[e * heads + k] = v;
                    total += v;
                }
                for e in lo..hi {
                    alpha[e * heads + k] /= total;
                }
                let o = &mut out.row_mut(i)[k * f..(k + 1) * f];
                for e in lo..hi {
                    let a = alpha[e * heads + k];
                    for (ov, &hv) in o.iter_mut().zip(&hv.row(adj.indices[e])[k * f..(k + 1) * f]) {
                        *ov += a * hv;
                    }
                }
            }
        }
        let ng = self.ng(h) || self.ng(a_self) || self.ng(a_nbr);
        let cache = GatCache { h, a_self, a_nbr, heads, adj, alpha, score };
        Ok(self.push(out, Op::Gat(Box::new(cache)), ng))
    }

    /// Attention coefficients of a [`Graph::gat`] result, per node, per head,
    /// aligned with the node's adjacency list.
    pub fn attention(&self, v: Var) -> Option<Vec<Vec<Vec<T>>>> {
        let Op::Gat(c) = &self.nodes[v.0].op else {
            return None;
        };
        Some(
            (0..c.adj.len())
                .map(|i| {
                    (0..c.heads)
                        .map(|k| (c.adj.offsets[i]..c.adj.offsets[i + 1]).map(|e| c.alpha[e * c.heads + k]).collect())
                        .collect()
                })
                .collect(),
        )
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
        let x = self.value(logits);
        let [n, c] = x.shape();
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
        }
        if n == 0 {
            return Err(Error::Shape("cross entropy over zero rows".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label: bad as u32, num_classes: c as u32 });
        }
        let mut probs = Tensor::zeros(n, c);
        let mut loss = T::zero();
        for r in 0..n {
            let row = x.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - mx).exp();
                total += *p;
            }
            probs.row_mut(r).iter_mut().for_each(|p| *p /= total);
            loss += total.ln() + mx - row[labels[r]];
        }
        let loss = loss / T::from_usize(n).unwrap();
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels, probs }, ng))
    }

    /// Accumulates `d loss / d param` into `store` for every trainable
    /// parameter on the tape. `loss` must be `1×1`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::Shape(format!("backward from a {:?} tensor", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |v: Var, d: Tensor<T>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(t) => t.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                &Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let [n, k] = av.shape();
                    let m = bv.cols();
                    if self.ng(a) {
                        let mut da = Tensor::zeros(n, k);
                        T::gemm(n, m, k, T::one(), g.data(), false, bv.data(), true, T::zero(), da.data_mut());
                        acc(a, da);
                    }
                    if self.ng(b) {
                        let mut db = Tensor::zeros(k, m);
                        T::gemm(k, n, m, T::one(), av.data(), true, g.data(), false, T::zero(), db.data_mut());
                        acc(b, db);
                    }
                }
                &Op::AddRow(x, b) => {
                    if self.ng(b) {
                        let mut db = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, &gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d += gv;
                            }
                        }
                        acc(b, db);
                    }
                    acc(x, g);
                }
                &Op::Add(a, b) => {
                    acc(a, g.clone());
                    acc(b, g);
                }
                &Op::Scale(x, s) => {
                    let mut d = g;
                    d.data_mut().iter_mut().for_each(|v| *v *= s);
                    acc(x, d);
                }
                &Op::Relu(x) => {
                    let mut d = g;
                    for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= T::zero() {
                            *dv = T::zero();
                        }
                    }
                    acc(x, d);
                }
                &Op::Elu(x) => {
                    let mut d = g;
                    for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= T::zero() {
                            *dv *= y + T::one();
                        }
                    }
                    acc(x, d);
                }
                Op::Concat(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let w = self.shape(p)[1];
                        if self.ng(p) {
                            let mut d = Tensor::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                d.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + w]);
                            }
                            acc(p, d);
                        }
                        c0 += w;
                    }
                }
                &Op::Sum(x) => {
                    let [r, c] = self.shape(x);
                    acc(x, Tensor::filled(r, c, g.item()));
                }
                Op::Interp(x, plan) => {
                    let [r, c] = self.shape(*x);
                    let mut d = Tensor::zeros(r, c);
                    for q in 0..plan.rows() {
                        let (ids, ws) = plan.row(q);
                        for (&j, &w) in ids.iter().zip(ws) {
                            for (dv, &gv) in d.row_mut(j).iter_mut().zip(g.row(q)) {
                                *dv += w * gv;
                            }
                        }
                    }
                    acc(*x, d);
                }
                Op::MaxPool { x, argmax } => {
                    let [r, c] = self.shape(*x);
                    let mut d = Tensor::zeros(r, c);
                    for (e, &src) in argmax.iter().enumerate() {
                        let col = e % c;
                        d.row_mut(src)[col] += g.data()[e];
                    }
                    acc(*x, d);
                }
                Op::Gat(cache) => {
                    let (dh, das, dan) = self.gat_backward(cache, &g);
                    acc(cache.h, dh);
                    acc(cache.a_self, das);
                    acc(cache.a_nbr, dan);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let n = probs.rows();
                    let scale = g.item() / T::from_usize(n).unwrap();
                    let mut d = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        d.row_mut(r)[l] -= T::one();
                    }
                    d.data_mut().iter_mut().for_each(|v| *v *= scale);
                    acc(*logits, d);
                }
            }
        }
        Ok(())
    }

    fn gat_backward(&self, c: &GatCache<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let hv = self.value(c.h);
        let [n, hf] = hv.shape();
        let heads = c.heads;
        let f = hf / heads;
        let (asv, anv) = (self.value(c.a_self).data(), self.value(c.a_nbr).data());
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let adj = &c.adj;
        let mut dh = Tensor::zeros(n, hf);
        let mut ds = vec![T::zero(); n * heads];
        let mut dt = vec![T::zero(); n * heads];
        let mut dalpha = Vec::new();
        for i in 0..n {
            let (lo, hi) = (adj.offsets[i], adj.offsets[i + 1]);
            let gi = g.row(i);
            for k in 0..heads {
                let sl = k * f..(k + 1) * f;
                dalpha.clear();
                let mut weighted = T::zero();
                for e in lo..hi {
                    let j = adj.indices[e];
                    let a = c.alpha[e * heads + k];
                    let hj = &hv.row(j)[sl.clone()];
                    let da: T = gi[sl.clone()].iter().zip(hj).map(|(&x, &y)| x * y).sum();
                    dalpha.push(da);
                    weighted += a * da;
                    for (d, &gv) in dh.row_mut(j)[sl.clone()].iter_mut().zip(&gi[sl.clone()]) {
                        *d += a * gv;
                    }
                }
                for (e, &da) in (lo..hi).zip(&dalpha) {
                    let a = c.alpha[e * heads + k];
                    let de = a * (da - weighted);
                    let dz = if c.score[e * heads + k] > T::zero() { de } else { de * slope };
                    ds[i * heads + k] += dz;
                    dt[adj.indices[e] * heads + k] += dz;
                }
            }
        }
        let mut das = Tensor::zeros(1, hf);
        let mut dan = Tensor::zeros(1, hf);
        for i in 0..n {
            for k in 0..heads {
                let (dsv, dtv) = (ds[i * heads + k], dt[i * heads + k]);
                for col in k * f..(k + 1) * f {
                    let x = hv.at(i, col);
                    das.data_mut()[col] += dsv * x;
                    dan.data_mut()[col] += dtv * x;
                    dh.row_mut(i)[col] += dsv * asv[col] + dtv * anv[col];
                }
            }
        }
        (dh, das, dan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn max_pool_spec_case() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap());
        let p = g.max_pool(x, &Groups::from_lists(&[vec![0, 1]])).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 5.0]);
        let single = g.max_pool(x, &Groups::from_lists(&[vec![1]])).unwrap();
        assert_eq!(g.value(single).data(), &[3.0, 2.0]);
    }

    #[test]
    fn max_pool_matches_brute_force_and_routes_ties_to_smallest_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = rand_tensor(&mut rng, 9, 4);
        let mut store = ParamStore::new();
        let id = store.add("x", t.clone()).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let groups = Groups::from_lists(&[vec![4, 0, 7], vec![2], vec![8, 1, 3, 5, 6]]);
        let p = g.max_pool(x, &groups).unwrap();
        for gi in 0..groups.len() {
            for c in 0..4 {
                let want = groups.group(gi).iter().map(|&j| t.at(j, c)).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(g.value(p).at(gi, c), want);
            }
        }
        // Duplicated rows tie; the gradient must land on the smaller index.
        let mut dup = t.clone();
        let r0 = dup.row(5).to_vec();
        dup.row_mut(2).copy_from_slice(&r0);
        let mut store = ParamStore::new();
        let id = store.add("x", dup).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let p = g.max_pool(x, &Groups::from_lists(&[vec![5, 2]])).unwrap();
        let s = g.sum(p);
        g.backward(s, &mut store).unwrap();
        assert!(store.grad(id).row(2).iter().all(|&v| v == 1.0));
        assert!(store.grad(id).row(5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elu_values_and_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.param(&store, id);
        let y = g.elu(x);
        assert_eq!(g.value(y).data(), &[(-1.0f64).exp() - 1.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[(-1.0f64).exp(), 1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        store.add("x", rand_tensor(&mut rng, 4, 5)).unwrap();
        let report = crate::nn::grad_check(
            &mut store,
            |s| {
                let mut g = Graph::new();
                let x = g.param(s, s.id("x").unwrap());
                let y = g.elu(x);
                let sq = g.elu(y);
                let l = g.sum(sq);
                Ok((g, l))
            },
            1e-6,
            20,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn empty_pool_group_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(2, 2));
        assert!(g.max_pool(x, &Groups::from_lists(&[vec![]])).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::filled(4, 19, 0.37));
        let l = g.cross_entropy(x, Arc::new(vec![0, 5, 18, 3])).unwrap();
        assert!((g.value(l).item() - 19f64.ln()).abs() < 1e-12);
        assert!((g.value(l).item() - 2.9444).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_vanishes_for_large_one_hot_logits() {
        let mut last = f64::INFINITY;
        for mag in [1.0, 5.0, 20.0, 80.0] {
            let mut t = Tensor::zeros(1, 5);
            t.row_mut(0)[2] = mag;
            let mut g = Graph::<f64>::new();
            let x = g.input(t);
            let ce = g.cross_entropy(x, Arc::new(vec![2])).unwrap();
            let l = g.value(ce).item();
            assert!(l >= 0.0 && l < last);
            last = l;
        }
        assert!(last < 1e-30);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = rand_tensor(&mut rng, 5, 7);
        let labels = vec![0, 6, 3, 3, 1];
        let mut want = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let lse = t.row(r).iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - t.at(r, l);
        }
        want /= 5.0;
        let mut g = Graph::new();
        let x = g.input(t);
        let l = g.cross_entropy(x, Arc::new(labels)).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(1, 3));
        assert!(matches!(g.cross_entropy(x, Arc::new(vec![3])), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn sum_of_param_has_unit_gradient_and_constants_have_none() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&mut rng, 3, 2)).unwrap();
        let b = store.add("b", rand_tensor(&mut rng, 2, 2)).unwrap();
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let s = g.sum(av);
        g.backward(s, &mut store).unwrap();
        assert!(store.grad(a).data().iter().all(|&v| v == 1.0));
        assert!(store.grad(b).data().iter().all(|&v| v == 0.0));

        store.zero_grad();
        let mut g = Graph::new();
        let c = g.input(Tensor::filled(2, 2, 3.0));
        let _unused = g.param(&store, b);
        let s = g.sum(c);
        g.backward(s, &mut store).unwrap();
        assert!(store.iter().all(|(_, p)| p.grad.data().iter().all(|&v| v == 0.0)));
    }

    fn path_adjacency(n: usize) -> Arc<Groups> {
        let lists: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut l = vec![i];
                if i > 0 {
                    l.push(i - 1);
                }
                if i + 1 < n {
                    l.push(i + 1);
                }
                l.sort();
                l
            })
            .collect();
        Arc::new(Groups::from_lists(&lists))
    }

    #[test]
    fn gat_attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let h = g.input(rand_tensor(&mut rng, 4, 8));
        let a = g.input(rand_tensor(&mut rng, 1, 8));
        let b = g.input(rand_tensor(&mut rng, 1, 8));
        let out = g.gat(h, a, b, 2, path_adjacency(4)).unwrap();
        for node in g.attention(out).unwrap() {
            for head in node {
                assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gat_single_node_copies_its_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::<f64>::new();
        let ht = rand_tensor(&mut rng, 1, 6);
        let h = g.input(ht.clone());
        let a = g.input(rand_tensor(&mut rng, 1, 6));
        let b = g.input(rand_tensor(&mut rng, 1, 6));
        let out = g.gat(h, a, b, 3, Arc::new(Groups::from_lists(&[vec![0]]))).unwrap();
        assert_eq!(g.value(out), &ht);
        assert_eq!(g.attention(out).unwrap()[0], vec![vec![1.0]; 3]);
    }

    #[test]
    fn gat_requires_self_loops() {
        let mut g = Graph::<f64>::new();
        let h = g.input(Tensor::zeros(2, 2));
        let a = g.input(Tensor::zeros(1, 2));
        let adj = Arc::new(Groups::from_lists(&[vec![0, 1], vec![0]]));
        assert!(matches!(g.gat(h, a, a, 1, adj), Err(Error::MissingSelfLoop(1))));
    }

    #[test]
    fn interp_and_concat_forward() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let plan = Arc::new(Interpolation::mean_of(&[vec![0, 1], vec![1]]));
        let y = g.interp(x, plan).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0, 3.0, 4.0]);
        let c = g.concat(&[x, y]).unwrap();
        assert_eq!(g.value(c).row(0), &[1.0, 2.0, 2.0, 3.0]);
    }
}
