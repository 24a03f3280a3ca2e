//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value is a `[rows, cols]` matrix; scalars are `[1, 1]`. A [`Graph`]
//! is built for one forward pass, then [`Graph::backward`] walks it in
//! reverse. Nodes that depend on no gradient-requiring leaf are skipped.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::real::{matmul, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Token groups for windowed attention. Tokens attend only within their
/// group and, when `region` is set, only to tokens with the same label.
#[derive(Debug, Clone, PartialEq)]
pub struct Windows {
    pub groups: Vec<Vec<u32>>,
    pub region: Option<Vec<u32>>,
}

impl Windows {
    pub fn full(n: usize) -> Self {
        Windows { groups: vec![(0..n as u32).collect()], region: None }
    }
}

/// Sparse linear map between row sets: `out[i] = sum_j w_ij * x[j]`.
///
/// When `affine` is set every tap list sums to one and the forward pass is
/// evaluated as `x[j0] + sum_k w_k (x[jk] - x[j0])`, which reproduces
/// constant inputs exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMixing<T> {
    pub taps: Vec<Vec<(u32, T)>>,
    pub affine: bool,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    LinComb(Vec<(Var, T)>),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    MulCol { x: Var, col: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, windows: Arc<Windows>, probs: Vec<T> },
    Gather { x: Var, index: Arc<Vec<u32>> },
    GatherRows { srcs: Vec<Var>, map: Arc<Vec<(u32, u32)>> },
    ConcatCols(Vec<Var>),
    RowMix { x: Var, mix: Arc<RowMixing<T>> },
    MeanRows(Var),
    WeightedAbsSum { x: Var, weights: Option<Arc<Vec<T>>>, scale: T },
}

struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
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

const LN_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value, rows, cols, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn scalar(&self, v: Var) -> T {
        assert_eq!(self.shape(v), (1, 1), "not a scalar");
        self.nodes[v.0].value[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Var {
        assert_eq!(value.len(), rows * cols, "constant shape mismatch");
        self.push(rows, cols, value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<T>, needs_grad: bool) -> Var {
        assert_eq!(value.len(), rows * cols, "leaf shape mismatch");
        self.push(rows, cols, value, Op::Leaf, needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension mismatch: {:?} x {:?}", (m, k), (k2, n));
        let mut out = vec![T::zero(); m * n];
        matmul(m, k, n, self.value(a), ta, self.value(b), tb, &mut out, false);
        let g = self.any_grad(&[a, b]);
        self.push(m, n, out, Op::MatMul { a, b, ta, tb }, g)
    }

    /// `x * w + b` with `w: [in, out]` and optional `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn lincomb(&mut self, terms: &[(Var, T)]) -> Var {
        assert!(!terms.is_empty());
        let shape = self.shape(terms[0].0);
        let mut out = vec![T::zero(); shape.0 * shape.1];
        for &(v, c) in terms {
            assert_eq!(self.shape(v), shape, "lincomb shape mismatch");
            for (o, &x) in out.iter_mut().zip(self.value(v)) {
                *o += c * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let g = self.any_grad(&vars);
        self.push(shape.0, shape.1, out, Op::LinComb(terms.to_vec()), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.lincomb(&[(a, T::one()), (b, T::one())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.lincomb(&[(a, T::one()), (b, -T::one())])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.lincomb(&[(x, s)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape, self.shape(b), "mul shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let g = self.any_grad(&[a, b]);
        self.push(shape.0, shape.1, out, Op::Mul(a, b), g)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(row), (1, c), "add_row expects [1, {c}]");
        let rv = self.value(row);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v + rv[i % c]).collect();
        let g = self.any_grad(&[x, row]);
        self.push(r, c, out, Op::AddRow { x, row }, g)
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(row), (1, c), "mul_row expects [1, {c}]");
        let rv = self.value(row);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v * rv[i % c]).collect();
        let g = self.any_grad(&[x, row]);
        self.push(r, c, out, Op::MulRow { x, row }, g)
    }

    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(col), (r, 1), "mul_col expects [{r}, 1]");
        let cv = self.value(col);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v * cv[i / c]).collect();
        let g = self.any_grad(&[x, col]);
        self.push(r, c, out, Op::MulCol { x, col }, g)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c));
        assert_eq!(self.shape(bias), (1, c));
        let eps = T::lit(LN_EPS);
        let cn = T::from_usize(c).unwrap();
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let g = self.any_grad(&[x, gain, bias]);
        self.push(r, c, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, g)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| gelu(v).0).collect();
        let g = self.any_grad(&[x]);
        self.push(r, c, out, Op::Gelu(x), g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let g = self.any_grad(&[x]);
        self.push(r, c, out, Op::Sigmoid(x), g)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let g = self.any_grad(&[x]);
        self.push(r, c, out, Op::SoftmaxRows(x), g)
    }

    /// Multi-head scaled dot-product attention within each window group.
    /// `q`, `k`, `v` are `[n, d]`; heads split `d` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, windows: Arc<Windows>) -> Var {
        let (n, d) = self.shape(q);
        assert_eq!(self.shape(k), (n, d));
        assert_eq!(self.shape(v), (n, d));
        assert!(heads > 0 && d % heads == 0, "dim {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); n * d];
        let mut probs = Vec::with_capacity(windows.groups.iter().map(|g| g.len() * g.len()).sum::<usize>() * heads);
        let mut scratch = Scratch::default();
        for group in &windows.groups {
            let l = group.len();
            for h in 0..heads {
                scratch.load(group, h * dh, dh, d, qv, kv, vv);
                let mut s = vec![T::zero(); l * l];
                matmul(l, dh, l, &scratch.q, false, &scratch.k, true, &mut s, false);
                for a in 0..l {
                    for b in 0..l {
                        let allowed = match &windows.region {
                            Some(reg) => reg[group[a] as usize] == reg[group[b] as usize],
                            None => true,
                        };
                        s[a * l + b] = if allowed { s[a * l + b] * scale } else { T::neg_infinity() };
                    }
                    softmax_in_place(&mut s[a * l..(a + 1) * l]);
                }
                let mut o = vec![T::zero(); l * dh];
                matmul(l, l, dh, &s, false, &scratch.v, false, &mut o, false);
                for (a, &t) in group.iter().enumerate() {
                    let dst = t as usize * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&o[a * dh..(a + 1) * dh]);
                }
                probs.extend_from_slice(&s);
            }
        }
        let g = self.any_grad(&[q, k, v]);
        self.push(n, d, out, Op::Attention { q, k, v, heads, windows, probs }, g)
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `[rows, cols]`.
    pub fn gather(&mut self, x: Var, rows: usize, cols: usize, index: Arc<Vec<u32>>) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length mismatch");
        let xv = self.value(x);
        let out = index.iter().map(|&i| xv[i as usize]).collect();
        let g = self.any_grad(&[x]);
        self.push(rows, cols, out, Op::Gather { x, index }, g)
    }

    /// Assembles rows from several sources: `out[i] = srcs[map[i].0][map[i].1]`.
    pub fn gather_rows(&mut self, srcs: &[Var], map: Arc<Vec<(u32, u32)>>) -> Var {
        let c = self.cols(srcs[0]);
        assert!(srcs.iter().all(|&s| self.cols(s) == c), "gather_rows column mismatch");
        let mut out = Vec::with_capacity(map.len() * c);
        for &(s, r) in map.iter() {
            let src = self.value(srcs[s as usize]);
            out.extend_from_slice(&src[r as usize * c..(r as usize + 1) * c]);
        }
        let g = self.any_grad(srcs);
        self.push(map.len(), c, out, Op::GatherRows { srcs: srcs.to_vec(), map }, g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.rows(parts[0]);
        assert!(parts.iter().all(|&p| self.rows(p) == r), "concat_cols row mismatch");
        let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.cols(p);
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let g = self.any_grad(parts);
        self.push(r, total, out, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn row_mix(&mut self, x: Var, mix: Arc<RowMixing<T>>) -> Var {
        let c = self.cols(x);
        let xv = self.value(x);
        let mut out = vec![T::zero(); mix.taps.len() * c];
        let row = |j: u32| &xv[j as usize * c..(j as usize + 1) * c];
        for (i, taps) in mix.taps.iter().enumerate() {
            let dst = &mut out[i * c..(i + 1) * c];
            if mix.affine && !taps.is_empty() {
                let base = row(taps[0].0);
                dst.copy_from_slice(base);
                for &(j, w) in &taps[1..] {
                    for ((o, &s), &b) in dst.iter_mut().zip(row(j)).zip(base) {
                        *o += w * (s - b);
                    }
                }
            } else {
                for &(j, w) in taps {
                    for (o, &s) in dst.iter_mut().zip(row(j)) {
                        *o += w * s;
                    }
                }
            }
        }
        let g = self.any_grad(&[x]);
        self.push(mix.taps.len(), c, out, Op::RowMix { x, mix }, g)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let inv = T::one() / T::from_usize(r).unwrap();
        let mut out = vec![T::zero(); c];
        for row in self.value(x).chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let g = self.any_grad(&[x]);
        self.push(1, c, out, Op::MeanRows(x), g)
    }

    /// `scale * sum_i w_i |x_i|` as a scalar; unit weights when `weights` is None.
    pub fn weighted_abs_sum(&mut self, x: Var, weights: Option<Arc<Vec<T>>>, scale: T) -> Var {
        let xv = self.value(x);
        let total = match &weights {
            Some(w) => {
                assert_eq!(w.len(), xv.len(), "weight length mismatch");
                xv.iter().zip(w.iter()).map(|(&v, &w)| w * v.abs()).sum::<T>()
            }
            None => xv.iter().map(|v| v.abs()).sum::<T>(),
        };
        let g = self.any_grad(&[x]);
        self.push(1, 1, vec![scale * total], Op::WeightedAbsSum { x, weights, scale }, g)
    }

    /// Mean absolute difference between two same-shape values.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let n = self.value(d).len();
        self.weighted_abs_sum(d, None, T::one() / T::from_usize(n).unwrap())
    }

    /// Hash of the sign pattern of every absolute-value input. Two
    /// evaluations with equal fingerprints lie on the same smooth piece of
    /// every L1 term, which finite-difference checks rely on.
    pub fn kink_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::WeightedAbsSum { x, weights, .. } = &node.op {
                for (i, &v) in self.value(*x).iter().enumerate() {
                    if weights.as_ref().is_some_and(|w| w[i] == T::zero()) {
                        continue;
                    }
                    let s: i8 = if v > T::zero() { 1 } else if v < T::zero() { -1 } else { 0 };
                    s.hash(&mut h);
                }
            }
        }
        h.finish()
    }

    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.backprop(node, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Gradients { grads }
    }

    fn backprop(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.shape(*a);
                let (br, bc) = self.shape(*b);
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bc };
                if nodes[a.0].needs_grad {
                    let ga = slot(grads, *a, ar * ac);
                    // dA = dC * op(B)^T, stored in A's layout.
                    if *ta {
                        matmul(k, n, m, &nodes[b.0].value, *tb, gy, true, ga, true);
                    } else {
                        matmul(m, n, k, gy, false, &nodes[b.0].value, !*tb, ga, true);
                    }
                }
                if nodes[b.0].needs_grad {
                    let gb = slot(grads, *b, br * bc);
                    if *tb {
                        matmul(n, m, k, gy, true, &nodes[a.0].value, *ta, gb, true);
                    } else {
                        matmul(k, m, n, &nodes[a.0].value, !*ta, gy, false, gb, true);
                    }
                }
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    if nodes[v.0].needs_grad {
                        for (g, &d) in slot(grads, v, gy.len()).iter_mut().zip(gy) {
                            *g += c * d;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (x, y) in [(*a, *b), (*b, *a)] {
                    if nodes[x.0].needs_grad {
                        let other = &nodes[y.0].value;
                        for ((g, &d), &o) in slot(grads, x, gy.len()).iter_mut().zip(gy).zip(other) {
                            *g += d * o;
                        }
                    }
                }
            }
            Op::AddRow { x, row } => {
                if nodes[x.0].needs_grad {
                    for (g, &d) in slot(grads, *x, gy.len()).iter_mut().zip(gy) {
                        *g += d;
                    }
                }
                if nodes[row.0].needs_grad {
                    let gr = slot(grads, *row, cols);
                    for (i, &d) in gy.iter().enumerate() {
                        gr[i % cols] += d;
                    }
                }
            }
            Op::MulRow { x, row } => {
                let (xv, rv) = (&nodes[x.0].value, &nodes[row.0].value);
                if nodes[x.0].needs_grad {
                    for (i, g) in slot(grads, *x, gy.len()).iter_mut().enumerate() {
                        *g += gy[i] * rv[i % cols];
                    }
                }
                if nodes[row.0].needs_grad {
                    let gr = slot(grads, *row, cols);
                    for (i, &d) in gy.iter().enumerate() {
                        gr[i % cols] += d * xv[i];
                    }
                }
            }
            Op::MulCol { x, col } => {
                let (xv, cv) = (&nodes[x.0].value, &nodes[col.0].value);
                if nodes[x.0].needs_grad {
                    for (i, g) in slot(grads, *x, gy.len()).iter_mut().enumerate() {
                        *g += gy[i] * cv[i / cols];
                    }
                }
                if nodes[col.0].needs_grad {
                    let gc = slot(grads, *col, rows);
                    for (i, &d) in gy.iter().enumerate() {
                        gc[i / cols] += d * xv[i];
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = &nodes[gain.0].value;
                if nodes[gain.0].needs_grad {
                    let gg = slot(grads, *gain, cols);
                    for (i, &d) in gy.iter().enumerate() {
                        gg[i % cols] += d * xhat[i];
                    }
                }
                if nodes[bias.0].needs_grad {
                    let gb = slot(grads, *bias, cols);
                    for (i, &d) in gy.iter().enumerate() {
                        gb[i % cols] += d;
                    }
                }
                if nodes[x.0].needs_grad {
                    let cn = T::from_usize(cols).unwrap();
                    let gx = slot(grads, *x, gy.len());
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let (dy, xh) = (&gy[span.clone()], &xhat[span.clone()]);
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..cols {
                            let dxh = dy[j] * gv[j];
                            mean_d += dxh;
                            mean_dx += dxh * xh[j];
                        }
                        mean_d = mean_d / cn;
                        mean_dx = mean_dx / cn;
                        for j in 0..cols {
                            let dxh = dy[j] * gv[j];
                            gx[r * cols + j] += rstd[r] * (dxh - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                for ((g, &d), &v) in slot(grads, *x, gy.len()).iter_mut().zip(gy).zip(xv) {
                    *g += d * gelu(v).1;
                }
            }
            Op::Sigmoid(x) => {
                for ((g, &d), &y) in slot(grads, *x, gy.len()).iter_mut().zip(gy).zip(&node.value) {
                    *g += d * y * (T::one() - y);
                }
            }
            Op::SoftmaxRows(x) => {
                let gx = slot(grads, *x, gy.len());
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let y = &node.value[span.clone()];
                    let d = &gy[span.clone()];
                    let dot: T = y.iter().zip(d).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        gx[r * cols + j] += y[j] * (d[j] - dot);
                    }
                }
            }
            Op::Attention { q, k, v, heads, windows, probs } => {
                self.attention_backward(*q, *k, *v, *heads, windows, probs, gy, grads);
            }
            Op::Gather { x, index } => {
                let n = nodes[x.0].value.len();
                let gx = slot(grads, *x, n);
                for (&i, &d) in index.iter().zip(gy) {
                    gx[i as usize] += d;
                }
            }
            Op::GatherRows { srcs, map } => {
                for (s_idx, &src) in srcs.iter().enumerate() {
                    if !nodes[src.0].needs_grad {
                        continue;
                    }
                    let n = nodes[src.0].value.len();
                    let gs = slot(grads, src, n);
                    for (i, &(s, r)) in map.iter().enumerate() {
                        if s as usize == s_idx {
                            let dst = &mut gs[r as usize * cols..(r as usize + 1) * cols];
                            for (g, &d) in dst.iter_mut().zip(&gy[i * cols..(i + 1) * cols]) {
                                *g += d;
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].cols;
                    if nodes[p.0].needs_grad {
                        let gp = slot(grads, p, rows * c);
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += gy[r * cols + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::RowMix { x, mix } => {
                let n = nodes[x.0].value.len();
                let gx = slot(grads, *x, n);
                for (i, taps) in mix.taps.iter().enumerate() {
                    let src = &gy[i * cols..(i + 1) * cols];
                    for &(j, w) in taps {
                        for (g, &d) in gx[j as usize * cols..(j as usize + 1) * cols].iter_mut().zip(src) {
                            *g += w * d;
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = (nodes[x.0].rows, nodes[x.0].cols);
                let inv = T::one() / T::from_usize(r).unwrap();
                let gx = slot(grads, *x, r * c);
                for (i, g) in gx.iter_mut().enumerate() {
                    *g += gy[i % c] * inv;
                }
            }
            Op::WeightedAbsSum { x, weights, scale } => {
                let xv = &nodes[x.0].value;
                let base = gy[0] * *scale;
                let gx = slot(grads, *x, xv.len());
                for (i, (g, &v)) in gx.iter_mut().zip(xv).enumerate() {
                    let w = weights.as_ref().map_or(T::one(), |w| w[i]);
                    let s = if v > T::zero() {
                        T::one()
                    } else if v < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    *g += base * w * s;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        windows: &Windows,
        probs: &[T],
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let nodes = &self.nodes;
        let (n, d) = self.shape(q);
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let mut gq = vec![T::zero(); n * d];
        let mut gk = vec![T::zero(); n * d];
        let mut gv = vec![T::zero(); n * d];
        let mut scratch = Scratch::default();
        let mut offset = 0;
        for group in &windows.groups {
            let l = group.len();
            for h in 0..heads {
                let p = &probs[offset..offset + l * l];
                offset += l * l;
                scratch.load(group, h * dh, dh, d, qv, kv, vv);
                let mut go = vec![T::zero(); l * dh];
                for (a, &t) in group.iter().enumerate() {
                    let src = t as usize * d + h * dh;
                    go[a * dh..(a + 1) * dh].copy_from_slice(&gy[src..src + dh]);
                }
                // dV = P^T dO, dP = dO V^T, dS = P (dP - rowsum(dP P)).
                let mut dvh = vec![T::zero(); l * dh];
                matmul(l, l, dh, p, true, &go, false, &mut dvh, false);
                let mut dp = vec![T::zero(); l * l];
                matmul(l, dh, l, &go, false, &scratch.v, true, &mut dp, false);
                for a in 0..l {
                    let row = a * l..(a + 1) * l;
                    let dot: T = p[row.clone()].iter().zip(&dp[row.clone()]).map(|(&x, &y)| x * y).sum();
                    for b in row {
                        dp[b] = p[b] * (dp[b] - dot) * scale;
                    }
                }
                let mut dqh = vec![T::zero(); l * dh];
                matmul(l, l, dh, &dp, false, &scratch.k, false, &mut dqh, false);
                let mut dkh = vec![T::zero(); l * dh];
                matmul(l, l, dh, &dp, true, &scratch.q, false, &mut dkh, false);
                for (a, &t) in group.iter().enumerate() {
                    let dst = t as usize * d + h * dh;
                    for j in 0..dh {
                        gq[dst + j] += dqh[a * dh + j];
                        gk[dst + j] += dkh[a * dh + j];
                        gv[dst + j] += dvh[a * dh + j];
                    }
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if nodes[var.0].needs_grad {
                for (s, x) in slot(grads, var, n * d).iter_mut().zip(g) {
                    *s += x;
                }
            }
        }
    }
}

#[derive(Default)]
struct Scratch<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> Scratch<T> {
    #[allow(clippy::too_many_arguments)]
    fn load(&mut self, group: &[u32], col: usize, dh: usize, d: usize, q: &[T], k: &[T], v: &[T]) {
        for (buf, src) in [(&mut self.q, q), (&mut self.k, k), (&mut self.v, v)] {
            buf.clear();
            for &t in group {
                let s = t as usize * d + col;
                buf.extend_from_slice(&src[s..s + dh]);
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Tanh-approximated GELU and its derivative.
pub fn gelu<T: Real>(x: T) -> (T, T) {
    let c = T::lit(0.797_884_560_802_865_4);
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = if *v == T::neg_infinity() { T::zero() } else { (*v - max).exp() };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()
    }

    /// Central-difference check of d(loss)/d(leaf) for a graph builder.
    fn check(shapes: &[(usize, usize)], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut rng = Rng::new(17);
        let inputs: Vec<Vec<f64>> = shapes.iter().map(|&(r, c)| rand_vec(&mut rng, r * c)).collect();
        let eval = |vals: &[Vec<f64>]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = shapes.iter().zip(vals).map(|(&(r, c), v)| g.leaf(r, c, v.clone(), true)).collect();
            let out = build(&mut g, &vars);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = shapes.iter().zip(&inputs).map(|(&(r, c), v)| g.leaf(r, c, v.clone(), true)).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-5;
        for (vi, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[vi].len()]);
            for e in 0..inputs[vi].len() {
                let mut plus = inputs.clone();
                plus[vi][e] += h;
                let mut minus = inputs.clone();
                minus[vi][e] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                assert!(
                    (numeric - analytic[e]).abs() < 1e-6 * (1.0 + numeric.abs()),
                    "input {vi} elem {e}: numeric {numeric} analytic {}",
                    analytic[e]
                );
            }
        }
    }

    /// Reduces any value to a scalar through a fixed random projection.
    fn project(g: &mut Graph<f64>, x: Var) -> Var {
        let (r, c) = g.shape(x);
        let mut rng = Rng::new(99);
        let w = g.constant(r, c, rand_vec(&mut rng, r * c));
        let p = g.mul(x, w);
        let ones = g.constant(c, 1, vec![1.0; c]);
        let col = g.matmul(p, ones);
        let ones_r = g.constant(1, r, vec![1.0; r]);
        g.matmul(ones_r, col)
    }

    #[test]
    fn grad_matmul_variants() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { (4, 3) } else { (3, 4) };
            let b = if tb { (2, 4) } else { (4, 2) };
            check(&[a, b], |g, v| {
                let y = g.matmul_t(v[0], ta, v[1], tb);
                project(g, y)
            });
        }
    }

    #[test]
    fn grad_elementwise_and_broadcast() {
        check(&[(3, 4), (3, 4), (1, 4), (3, 1)], |g, v| {
            let a = g.mul(v[0], v[1]);
            let b = g.add_row(a, v[2]);
            let c = g.mul_row(b, v[2]);
            let d = g.mul_col(c, v[3]);
            let e = g.lincomb(&[(d, 0.5), (v[0], -2.0)]);
            let f = g.gelu(e);
            let s = g.sigmoid(f);
            project(g, s)
        });
    }

    #[test]
    fn grad_layer_norm_and_softmax() {
        check(&[(3, 5), (1, 5), (1, 5)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            let s = g.softmax_rows(y);
            project(g, s)
        });
    }

    #[test]
    fn grad_attention_windows_and_regions() {
        let windows = Arc::new(Windows { groups: vec![vec![0, 2, 4], vec![1, 3, 5]], region: Some(vec![0, 0, 1, 0, 0, 1]) });
        check(&[(6, 4), (6, 4), (6, 4)], move |g, v| {
            let y = g.attention(v[0], v[1], v[2], 2, windows.clone());
            project(g, y)
        });
    }

    #[test]
    fn grad_rearrangements() {
        let mix = Arc::new(RowMixing { taps: vec![vec![(0, 0.25), (1, 0.75)], vec![(2, 1.0)], vec![(1, 0.5), (0, 0.5)]], affine: true });
        let loose = Arc::new(RowMixing { taps: vec![vec![(0, 0.3), (2, -1.5)], vec![(1, 2.0)]], affine: false });
        check(&[(3, 2), (2, 2), (3, 3)], move |g, v| {
            let t = g.gather(v[0], 2, 3, Arc::new(vec![5, 3, 1, 0, 0, 2]));
            let rows = g.gather_rows(&[v[0], v[1]], Arc::new(vec![(1, 0), (0, 2), (1, 1), (1, 0)]));
            let cat = g.concat_cols(&[v[2], v[0]]);
            let mixed = g.row_mix(v[0], mix.clone());
            let loose_mixed = g.row_mix(v[0], loose.clone());
            let mixed = g.concat_cols(&[mixed, v[2]]);
            let mixed = g.gather_rows(&[mixed], Arc::new(vec![(0, 0), (0, 1)]));
            let mixed = g.concat_cols(&[mixed, loose_mixed]);
            let mean = g.mean_rows(cat);
            let a = project(g, t);
            let b = project(g, rows);
            let c = project(g, mixed);
            let d = project(g, mean);
            g.lincomb(&[(a, 1.0), (b, 1.0), (c, 1.0), (d, 1.0)])
        });
    }

    #[test]
    fn grad_weighted_abs() {
        check(&[(2, 3), (2, 3)], |g, v| {
            let d = g.sub(v[0], v[1]);
            g.weighted_abs_sum(d, Some(Arc::new(vec![1.0, 2.0, 0.5, 0.0, 3.0, 1.5])), 0.7)
        });
    }

    #[test]
    fn full_window_matches_single_group() {
        let mut rng = Rng::new(4);
        let data: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 8 * 4)).collect();
        let run = |w: Windows| {
            let mut g = Graph::new();
            let v: Vec<Var> = data.iter().map(|d| g.constant(8, 4, d.clone())).collect();
            let out = g.attention(v[0], v[1], v[2], 2, Arc::new(w));
            g.value(out).to_vec()
        };
        let reversed = Windows { groups: vec![(0..8u32).rev().collect()], region: None };
        let a = run(Windows::full(8));
        let b = run(reversed);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let x = g.leaf(2, 2, vec![0.5; 4], true);
        let y = g.mul(c, x);
        let l = g.weighted_abs_sum(y, None, 1.0);
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn fingerprint_tracks_sign_changes() {
        let fp = |x: f64| {
            let mut g = Graph::<f64>::new();
            let v = g.leaf(1, 2, vec![x, 1.0], true);
            g.weighted_abs_sum(v, None, 1.0);
            g.kink_fingerprint()
        };
        assert_eq!(fp(0.3), fp(0.5));
        assert_ne!(fp(0.3), fp(-0.3));
    }
}
