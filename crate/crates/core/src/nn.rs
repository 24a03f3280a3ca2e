//! Named parameter storage and the transformer building blocks shared by
//! the pretraining and fine-tuning networks.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Gradients, Graph, RowMixing, Var, Windows};

pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
    pub trainable: bool,
}

impl<T> Param<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered collection of named 2-D tensors with per-tensor trainable flags.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<T>) {
        let name = name.into();
        assert_eq!(data.len(), rows * cols, "tensor `{name}` has wrong length");
        assert!(!self.index.contains_key(&name), "duplicate tensor `{name}`");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, rows, cols, data, trainable: true });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| pred(&p.name)) {
            p.trainable = trainable;
        }
    }

    /// Copies every tensor whose name starts with `prefix` into `self`.
    pub fn extend_from(&mut self, other: &ParamStore<T>, prefix: &str) {
        for p in other.iter().filter(|p| p.name.starts_with(prefix)) {
            self.insert(p.name.clone(), p.rows, p.cols, p.data.clone());
            self.params.last_mut().unwrap().trainable = p.trainable;
        }
    }

    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        out.extend_from(self, prefix);
        out
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.rows, p.cols, p.data.iter().map(|&v| U::lit(v.as_f64())).collect());
            out.params.last_mut().unwrap().trainable = p.trainable;
        }
        out
    }

    /// Errors unless `self` and `expected` hold the same names and shapes.
    pub fn check_layout(&self, expected: &ParamStore<T>) -> Result<()> {
        for p in expected.iter() {
            match self.get(&p.name) {
                None => return Err(Error::Checkpoint { name: p.name.clone(), reason: "missing".into() }),
                Some(q) if (q.rows, q.cols) != (p.rows, p.cols) => {
                    return Err(Error::Checkpoint {
                        name: p.name.clone(),
                        reason: format!("shape {}x{} but config expects {}x{}", q.rows, q.cols, p.rows, p.cols),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.iter().find(|p| expected.get(&p.name).is_none()) {
            return Err(Error::Checkpoint { name: extra.name.clone(), reason: "not expected by config".into() });
        }
        Ok(())
    }
}

/// Per-parameter gradient buffers indexed like the store.
pub type ParamGrads<T> = Vec<Option<Vec<T>>>;

pub fn add_grads<T: Real>(acc: &mut ParamGrads<T>, other: &ParamGrads<T>) {
    if acc.len() < other.len() {
        acc.resize(other.len(), None);
    }
    for (a, o) in acc.iter_mut().zip(other) {
        if let Some(o) = o {
            match a {
                Some(a) => a.iter_mut().zip(o).for_each(|(x, &y)| *x += y),
                None => *a = Some(o.clone()),
            }
        }
    }
}

/// Binds the tensors of one store into a graph on first use.
pub struct Session<'a, T> {
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    constant: bool,
}

impl<'a, T: Real> Session<'a, T> {
    /// Trainable tensors become gradient-requiring leaves.
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Session { store, vars: vec![None; store.len()], constant: false }
    }

    /// Every tensor is bound as a constant.
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Session { store, vars: vec![None; store.len()], constant: true }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, g: &mut Graph<T>, name: &str) -> Var {
        let i = self.store.index_of(name).unwrap_or_else(|| panic!("unknown tensor `{name}`"));
        if let Some(v) = self.vars[i] {
            return v;
        }
        let p = &self.store.params()[i];
        let v = g.leaf(p.rows, p.cols, p.data.clone(), p.trainable && !self.constant);
        self.vars[i] = Some(v);
        v
    }

    pub fn var_of(&self, name: &str) -> Option<Var> {
        self.store.index_of(name).and_then(|i| self.vars[i])
    }

    pub fn gradients(&self, grads: &mut Gradients<T>) -> ParamGrads<T> {
        self.vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }
}

pub fn xavier<T: Real>(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Vec<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| T::lit(rng.uniform_in(-bound, bound) as f32 as f64)).collect()
}

pub fn small_uniform<T: Real>(rng: &mut Rng, n: usize, std: f64) -> Vec<T> {
    // Uniform with the given standard deviation.
    let bound = std * 3f64.sqrt();
    (0..n).map(|_| T::lit(rng.uniform_in(-bound, bound) as f32 as f64)).collect()
}

pub fn add_linear<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize, bias: bool) {
    store.insert(format!("{name}.w"), fan_in, fan_out, xavier(rng, fan_in, fan_out));
    if bias {
        store.insert(format!("{name}.b"), 1, fan_out, vec![T::zero(); fan_out]);
    }
}

pub fn add_norm<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), 1, dim, vec![T::one(); dim]);
    store.insert(format!("{name}.b"), 1, dim, vec![T::zero(); dim]);
}

/// Pre-norm transformer block: attention and a GELU MLP, both residual.
pub fn add_block<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, prefix: &str, dim: usize) {
    add_norm(store, &format!("{prefix}.ln1"), dim);
    for proj in ["q", "k", "v", "proj"] {
        add_linear(store, rng, &format!("{prefix}.attn.{proj}"), dim, dim, true);
    }
    add_norm(store, &format!("{prefix}.ln2"), dim);
    add_linear(store, rng, &format!("{prefix}.mlp.fc1"), dim, MLP_RATIO * dim, true);
    add_linear(store, rng, &format!("{prefix}.mlp.fc2"), MLP_RATIO * dim, dim, true);
}

/// Closed-form parameter count of [`add_block`].
pub fn block_param_count(dim: usize) -> usize {
    2 * dim + 4 * (dim * dim + dim) + 2 * dim + 2 * MLP_RATIO * dim * dim + MLP_RATIO * dim + dim
}

pub fn linear<T: Real>(g: &mut Graph<T>, s: &mut Session<T>, name: &str, x: Var, bias: bool) -> Var {
    let w = s.p(g, &format!("{name}.w"));
    let b = bias.then(|| s.p(g, &format!("{name}.b")));
    g.linear(x, w, b)
}

pub fn norm<T: Real>(g: &mut Graph<T>, s: &mut Session<T>, name: &str, x: Var) -> Var {
    let gain = s.p(g, &format!("{name}.g"));
    let bias = s.p(g, &format!("{name}.b"));
    g.layer_norm(x, gain, bias)
}

pub fn block<T: Real>(
    g: &mut Graph<T>,
    s: &mut Session<T>,
    prefix: &str,
    x: Var,
    heads: usize,
    windows: Arc<Windows>,
) -> Var {
    let h = norm(g, s, &format!("{prefix}.ln1"), x);
    let q = linear(g, s, &format!("{prefix}.attn.q"), h, true);
    let k = linear(g, s, &format!("{prefix}.attn.k"), h, true);
    let v = linear(g, s, &format!("{prefix}.attn.v"), h, true);
    let a = g.attention(q, k, v, heads, windows);
    let a = linear(g, s, &format!("{prefix}.attn.proj"), a, true);
    let x = g.add(x, a);
    let h = norm(g, s, &format!("{prefix}.ln2"), x);
    let h = linear(g, s, &format!("{prefix}.mlp.fc1"), h, true);
    let h = g.gelu(h);
    let h = linear(g, s, &format!("{prefix}.mlp.fc2"), h, true);
    g.add(x, h)
}

/// Fixed 2-D sine-cosine position table for a row-major grid, `[gh*gw, dim]`.
/// The first half of each row encodes the grid row, the second the column.
pub fn sincos_2d(grid_h: usize, grid_w: usize, dim: usize) -> Vec<f64> {
    assert!(dim.is_multiple_of(4), "positional dim {dim} must be divisible by 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter).map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64)).collect();
    let mut out = Vec::with_capacity(grid_h * grid_w * dim);
    for i in 0..grid_h {
        for j in 0..grid_w {
            for pos in [i as f64, j as f64] {
                out.extend(omega.iter().map(|w| (pos * w).sin()));
                out.extend(omega.iter().map(|w| (pos * w).cos()));
            }
        }
    }
    out
}

/// Selected rows of [`sincos_2d`].
pub fn sincos_rows<T: Real>(grid_h: usize, grid_w: usize, dim: usize, rows: &[usize]) -> Vec<T> {
    let table = sincos_2d(grid_h, grid_w, dim);
    rows.iter().flat_map(|&r| table[r * dim..(r + 1) * dim].iter().map(|&v| T::lit(v))).collect()
}

/// Gather index turning an `[h, w]` image into patch rows `[n, p*p]`,
/// restricted to the listed patches.
pub fn patch_index(height: usize, width: usize, p: usize, patches: &[usize]) -> Vec<u32> {
    let grid_w = width / p;
    let _ = height;
    let mut idx = Vec::with_capacity(patches.len() * p * p);
    for &r in patches {
        let (pi, pj) = (r / grid_w, r % grid_w);
        for a in 0..p {
            for b in 0..p {
                idx.push(((pi * p + a) * width + pj * p + b) as u32);
            }
        }
    }
    idx
}

/// Gather index inverting [`patch_index`] over all patches.
pub fn unpatch_index(height: usize, width: usize, p: usize) -> Vec<u32> {
    (0..height * width)
        .map(|k| crate::patch::token_index(k / width, k % width, width, p) as u32)
        .collect()
}

/// Gather index for 2x2 patch merging of a `[gh*gw, c]` grid into
/// `[(gh/2)*(gw/2), 4c]`, concatenating (2i,2j), (2i+1,2j), (2i,2j+1), (2i+1,2j+1).
pub fn merge_index(grid_h: usize, grid_w: usize, c: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(grid_h * grid_w * c);
    for i in 0..grid_h / 2 {
        for j in 0..grid_w / 2 {
            for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let src = (2 * i + di) * grid_w + 2 * j + dj;
                idx.extend((0..c).map(|ch| (src * c + ch) as u32));
            }
        }
    }
    idx
}

/// Gather index for patch expanding: `[gh*gw, f*f*c]` laid out as
/// (p1, p2, c) per token becomes `[(f*gh)*(f*gw), c]`.
pub fn expand_index(grid_h: usize, grid_w: usize, factor: usize, c: usize) -> Vec<u32> {
    let (oh, ow) = (grid_h * factor, grid_w * factor);
    let mut idx = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            let token = (y / factor) * grid_w + x / factor;
            let sub = (y % factor) * factor + x % factor;
            idx.extend((0..c).map(|ch| (token * factor * factor * c + sub * c + ch) as u32));
        }
    }
    idx
}

/// Bilinear x2 upsampling of a row-major grid with half-pixel centres and
/// clamped source coordinates.
pub fn bilinear_x2<T: Real>(grid_h: usize, grid_w: usize) -> RowMixing<T> {
    let axis = |n: usize| -> Vec<(usize, usize, f64)> {
        (0..2 * n)
            .map(|dst| {
                let src = ((dst as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(grid_h), axis(grid_w));
    let mut taps = Vec::with_capacity(4 * grid_h * grid_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let at = |y: usize, x: usize| (y * grid_w + x) as u32;
            taps.push(vec![
                (at(y0, x0), T::lit((1.0 - fy) * (1.0 - fx))),
                (at(y0, x1), T::lit((1.0 - fy) * fx)),
                (at(y1, x0), T::lit(fy * (1.0 - fx))),
                (at(y1, x1), T::lit(fy * fx)),
            ]);
        }
    }
    RowMixing { taps, affine: true }
}

/// Shifted-window partition of a row-major grid. The window shrinks to the
/// grid when the grid is smaller; the shift applies only when the grid
/// exceeds the window.
pub fn window_partition(grid_h: usize, grid_w: usize, window: usize, shifted: bool) -> Result<Windows> {
    let (wh, ww) = (window.min(grid_h), window.min(grid_w));
    if wh == 0 || !grid_h.is_multiple_of(wh) || !grid_w.is_multiple_of(ww) {
        return Err(Error::config(format!("{grid_h}x{grid_w} grid is not divisible by window {window}")));
    }
    let shift = if shifted && grid_h > window && grid_w > window { window / 2 } else { 0 };
    let (nwh, nww) = (grid_h / wh, grid_w / ww);
    let mut groups = vec![Vec::with_capacity(wh * ww); nwh * nww];
    let mut region = vec![0u32; grid_h * grid_w];
    let label = |p: usize, n: usize, w: usize| -> u32 {
        if shift == 0 || p < n - w {
            0
        } else if p < n - shift {
            1
        } else {
            2
        }
    };
    for si in 0..grid_h {
        for sj in 0..grid_w {
            // (si, sj) are coordinates after a cyclic shift by -shift.
            let (i, j) = ((si + shift) % grid_h, (sj + shift) % grid_w);
            let token = i * grid_w + j;
            groups[(si / wh) * nww + sj / ww].push(token as u32);
            region[token] = label(si, grid_h, wh) * 3 + label(sj, grid_w, ww);
        }
    }
    Ok(Windows { groups, region: (shift > 0).then_some(region) })
}
