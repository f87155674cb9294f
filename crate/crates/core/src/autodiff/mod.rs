//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and backward simply walks it in reverse. Forward values
//! are computed with the same row kernels the tape-free inference path uses,
//! which is what makes a taped training forward bit-identical to a rollout
//! forward under the same engine profile. Backward always runs canonical f64
//! arithmetic; reduced-precision rounding is treated as identity there.

mod grad_check;

use alloc::vec;
use alloc::vec::Vec;

pub use grad_check::grad_check;

use crate::engine::{self, Reduction, SoftmaxStyle};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    AddConst { x: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Silu { x: Var },
    RmsNorm { x: Var, gain: Var, inv: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    MaskedSoftmax { logits: Var },
    LogSoftmax { x: Var },
    Pick { x: Var, entries: Vec<(usize, usize)> },
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterAddRows { base: Var, src: Var, rows: Vec<usize> },
    ScaleRows { x: Var, s: Var },
    Sum { x: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Single-threaded while recording and during
/// backward; build one tape per sequence.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if nothing downstream of the
    /// output depends on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    shape_err(op, alloc::format!("{:?} vs {:?}", a, b))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Register a tensor. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    /// `a [n,k] · b [k,m]`; every row is computed with [`engine::vecmat`].
    pub fn matmul(&mut self, a: Var, b: Var, red: Reduction) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(mismatch("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; n * m];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for (i, row) in out.chunks_exact_mut(m).enumerate() {
                engine::vecmat(&av[i * k..(i + 1) * k], bv, m, red, row);
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(t, Op::MatMul { a, b }, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    /// `x [n,m] + bias [m]` row by row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, m) = self.value(x).dims2()?;
        if self.value(bias).len() != m {
            return Err(mismatch("add_bias", self.value(x).shape(), self.value(bias).shape()));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(m)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let t = Tensor::new(self.value(x).shape(), data)?;
        Ok(self.push(t, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Adds a constant tensor; gradient passes straight through to `x`.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        if self.value(x).len() != c.len() {
            return Err(shape_err("add_const", alloc::format!("{} vs {}", self.value(x).len(), c.len())));
        }
        let data = self.value(x).data().iter().zip(c).map(|(v, c)| v + c).collect();
        let t = Tensor::new(self.value(x).shape(), data)?;
        Ok(self.push(t, Op::AddConst { x }, &[x]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor::new(self.value(x).shape(), data)?;
        Ok(self.push(t, Op::Scale { x, c }, &[x]))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| engine::silu(v)).collect();
        let t = Tensor::new(self.value(x).shape(), data)?;
        Ok(self.push(t, Op::Silu { x }, &[x]))
    }

    /// Row-wise RMS normalization with a learned gain of width `d`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(gain).len() != d {
            return Err(mismatch("rmsnorm", self.value(x).shape(), self.value(gain).shape()));
        }
        let mut out = vec![0.0; n * d];
        let mut inv = Vec::with_capacity(n);
        {
            let xv = self.value(x).data();
            let g = self.value(gain).data();
            for (i, row) in out.chunks_exact_mut(d).enumerate() {
                inv.push(engine::rmsnorm_row(&xv[i * d..(i + 1) * d], g, row));
            }
        }
        let t = Tensor::new(self.value(x).shape(), out)?;
        Ok(self.push(t, Op::RmsNorm { x, gain, inv }, &[x, gain]))
    }

    /// Rows of `table [V,d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("embedding", alloc::format!("id {} out of vocabulary {}", bad, v)));
        }
        let tv = self.value(table).data();
        let data: Vec<f64> = ids.iter().flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied()).collect();
        let t = Tensor::matrix(ids.len(), d, data)?;
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Causal multi-head scaled dot-product attention over `[n,d]` inputs.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, style: SoftmaxStyle) -> Result<Var> {
        let (n, d) = self.value(q).dims2()?;
        if self.value(k).shape() != self.value(q).shape() || self.value(v).shape() != self.value(q).shape() {
            return Err(mismatch("attention", self.value(q).shape(), self.value(k).shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", alloc::format!("width {} not divisible by {} heads", d, heads)));
        }
        let mut out = vec![0.0; n * d];
        // probs for row t occupy heads*(t+1) entries, rows packed in order
        let mut probs = Vec::with_capacity(heads * n * (n + 1) / 2);
        {
            let qv = self.value(q).data();
            let kv = self.value(k).data();
            let vv = self.value(v).data();
            for t in 0..n {
                let mut p = vec![0.0; heads * (t + 1)];
                engine::attend_row(
                    &qv[t * d..(t + 1) * d],
                    &kv[..(t + 1) * d],
                    &vv[..(t + 1) * d],
                    heads,
                    style,
                    &mut out[t * d..(t + 1) * d],
                    &mut p,
                );
                probs.extend_from_slice(&p);
            }
        }
        let t = Tensor::matrix(n, d, out)?;
        Ok(self.push(t, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Row-wise softmax over the positions selected by `mask` (same shape as
    /// `logits`). Masked-out positions output 0 and receive zero gradient.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool], style: SoftmaxStyle) -> Result<Var> {
        let (n, m) = self.value(logits).dims2()?;
        if mask.len() != n * m {
            return Err(shape_err("masked_softmax", alloc::format!("mask {} for {}x{}", mask.len(), n, m)));
        }
        let mut out = vec![0.0; n * m];
        {
            let lv = self.value(logits).data();
            for i in 0..n {
                engine::masked_softmax_row(
                    &lv[i * m..(i + 1) * m],
                    &mask[i * m..(i + 1) * m],
                    style,
                    &mut out[i * m..(i + 1) * m],
                )?;
            }
        }
        let t = Tensor::new(self.value(logits).shape(), out)?;
        Ok(self.push(t, Op::MaskedSoftmax { logits }, &[logits]))
    }

    pub fn log_softmax(&mut self, x: Var, style: SoftmaxStyle) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        let mut out = vec![0.0; n * m];
        {
            let xv = self.value(x).data();
            for i in 0..n {
                engine::log_softmax_row(&xv[i * m..(i + 1) * m], style, &mut out[i * m..(i + 1) * m]);
            }
        }
        let t = Tensor::new(self.value(x).shape(), out)?;
        Ok(self.push(t, Op::LogSoftmax { x }, &[x]))
    }

    /// Vector of `x[r, c]` for each `(r, c)` in `entries`.
    pub fn pick(&mut self, x: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if entries.iter().any(|&(r, c)| r >= n || c >= m) {
            return Err(shape_err("pick", "entry out of range"));
        }
        let xv = self.value(x).data();
        let data = entries.iter().map(|&(r, c)| xv[r * m + c]).collect();
        let t = Tensor::vector(data);
        Ok(self.push(t, Op::Pick { x, entries: entries.to_vec() }, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if rows.iter().any(|&r| r >= n) {
            return Err(shape_err("gather_rows", "row out of range"));
        }
        let xv = self.value(x).data();
        let data = rows.iter().flat_map(|&r| xv[r * d..(r + 1) * d].iter().copied()).collect();
        let t = Tensor::matrix(rows.len(), d, data)?;
        Ok(self.push(t, Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// `base` with `src[i]` added into row `rows[i]`.
    pub fn scatter_add_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.value(base).dims2()?;
        let (ns, ds) = self.value(src).dims2()?;
        if ds != d || ns != rows.len() || rows.iter().any(|&r| r >= n) {
            return Err(mismatch("scatter_add_rows", self.value(base).shape(), self.value(src).shape()));
        }
        let mut data = self.value(base).data().to_vec();
        {
            let sv = self.value(src).data();
            for (i, &r) in rows.iter().enumerate() {
                for (o, s) in data[r * d..(r + 1) * d].iter_mut().zip(&sv[i * d..(i + 1) * d]) {
                    *o += s;
                }
            }
        }
        let t = Tensor::new(self.value(base).shape(), data)?;
        Ok(self.push(t, Op::ScatterAddRows { base, src, rows: rows.to_vec() }, &[base, src]))
    }

    /// Row `i` of `x [n,d]` scaled by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(s).len() != n {
            return Err(mismatch("scale_rows", self.value(x).shape(), self.value(s).shape()));
        }
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(d.max(1))
            .zip(sv)
            .flat_map(|(row, &c)| row.iter().map(move |v| c * v))
            .collect();
        let t = Tensor::new(self.value(x).shape(), data)?;
        Ok(self.push(t, Op::ScaleRows { x, s }, &[x, s]))
    }

    /// Left-to-right total of all elements.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = 0.0;
        for v in self.value(x).data() {
            acc += v;
        }
        Ok(self.push(Tensor::scalar(acc), Op::Sum { x }, &[x]))
    }

    /// Backward from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(shape_err("backward", "output is not a scalar"));
        }
        self.backward_seeded(out, &[1.0])
    }

    /// Backward with an explicit upstream gradient for `out`.
    pub fn backward_seeded(&self, out: Var, seed: &[f64]) -> Result<Gradients> {
        if seed.len() != self.value(out).len() {
            return Err(shape_err("backward", "seed length differs from output"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed.to_vec());
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (n, k) = av.dims2().unwrap();
                let (_, m) = bv.dims2().unwrap();
                let (ad, bd) = (av.data(), bv.data());
                acc(*a, &mut |ga| {
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for kk in 0..k {
                            let brow = &bd[kk * m..(kk + 1) * m];
                            let mut s = 0.0;
                            for (x, y) in gi.iter().zip(brow) {
                                s += x * y;
                            }
                            ga[i * k + kk] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for kk in 0..k {
                            let a_ik = ad[i * k + kk];
                            if a_ik == 0.0 {
                                continue;
                            }
                            for (o, x) in gb[kk * m..(kk + 1) * m].iter_mut().zip(gi) {
                                *o += a_ik * x;
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::AddConst { x } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v));
            }
            Op::AddBias { x, bias } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                let m = nodes[bias.0].value.len();
                acc(*bias, &mut |gb| {
                    for row in g.chunks_exact(m) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale { x, c } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += c * v));
            }
            Op::Silu { x } => {
                let xd = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        let s = 1.0 / (1.0 + libm::exp(-xd[i]));
                        gx[i] += g[i] * (s + xd[i] * s * (1.0 - s));
                    }
                });
            }
            Op::RmsNorm { x, gain, inv } => {
                let xv = &nodes[x.0].value;
                let (_, d) = xv.dims2().unwrap();
                let xd = xv.data();
                let gd = nodes[gain.0].value.data();
                acc(*x, &mut |gx| {
                    for (i, &r) in inv.iter().enumerate() {
                        let xr = &xd[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let mut dot = 0.0;
                        for j in 0..d {
                            dot += gd[j] * gr[j] * xr[j];
                        }
                        let c = r * r * r * dot / d as f64;
                        for j in 0..d {
                            gx[i * d + j] += r * gd[j] * gr[j] - c * xr[j];
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (i, &r) in inv.iter().enumerate() {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xd[i * d + j] * r;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.dims2().unwrap().1;
                acc(*table, &mut |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[i * d + j];
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (n, d) = nodes[q.0].value.dims2().unwrap();
                let hd = d / heads;
                let scale = 1.0 / libm::sqrt(hd as f64);
                let (qd, kd, vd) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; n * d];
                let mut gv = vec![0.0; n * d];
                let mut off = 0;
                let mut dscore = vec![0.0; n];
                for t in 0..n {
                    let len = t + 1;
                    for h in 0..*heads {
                        let p = &probs[off + h * len..off + (h + 1) * len];
                        let go = &g[t * d + h * hd..t * d + (h + 1) * hd];
                        let mut mean = 0.0;
                        for j in 0..len {
                            let vj = &vd[j * d + h * hd..j * d + (h + 1) * hd];
                            let mut dp = 0.0;
                            for (a, b) in go.iter().zip(vj) {
                                dp += a * b;
                            }
                            dscore[j] = dp;
                            mean += p[j] * dp;
                            for (o, a) in gv[j * d + h * hd..j * d + (h + 1) * hd].iter_mut().zip(go) {
                                *o += p[j] * a;
                            }
                        }
                        for j in 0..len {
                            let ds = p[j] * (dscore[j] - mean) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for i in 0..hd {
                                gq[t * d + h * hd + i] += ds * kd[j * d + h * hd + i];
                                gk[j * d + h * hd + i] += ds * qd[t * d + h * hd + i];
                            }
                        }
                    }
                    off += heads * len;
                }
                acc(*q, &mut |o| o.iter_mut().zip(&gq).for_each(|(a, b)| *a += b));
                acc(*k, &mut |o| o.iter_mut().zip(&gk).for_each(|(a, b)| *a += b));
                acc(*v, &mut |o| o.iter_mut().zip(&gv).for_each(|(a, b)| *a += b));
            }
            Op::MaskedSoftmax { logits } => {
                let p = node.value.data();
                let m = node.value.dims2().unwrap().1;
                acc(*logits, &mut |gl| {
                    for (i, (pr, gr)) in p.chunks_exact(m).zip(g.chunks_exact(m)).enumerate() {
                        let mut dot = 0.0;
                        for (a, b) in pr.iter().zip(gr) {
                            dot += a * b;
                        }
                        for j in 0..m {
                            // p_j = 0 off-mask, so masked positions get exactly 0
                            gl[i * m + j] += pr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x } => {
                let y = node.value.data();
                let m = node.value.dims2().unwrap().1;
                acc(*x, &mut |gx| {
                    for (i, (yr, gr)) in y.chunks_exact(m).zip(g.chunks_exact(m)).enumerate() {
                        let mut total = 0.0;
                        for v in gr {
                            total += v;
                        }
                        for j in 0..m {
                            gx[i * m + j] += gr[j] - libm::exp(yr[j]) * total;
                        }
                    }
                });
            }
            Op::Pick { x, entries } => {
                let m = nodes[x.0].value.dims2().unwrap().1;
                acc(*x, &mut |gx| {
                    for (i, &(r, c)) in entries.iter().enumerate() {
                        gx[r * m + c] += g[i];
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let d = nodes[x.0].value.dims2().unwrap().1;
                acc(*x, &mut |gx| {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            gx[r * d + j] += g[i * d + j];
                        }
                    }
                });
            }
            Op::ScatterAddRows { base, src, rows } => {
                let d = nodes[base.0].value.dims2().unwrap().1;
                acc(*base, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(*src, &mut |gs| {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            gs[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::ScaleRows { x, s } => {
                let xv = &nodes[x.0].value;
                let d = xv.dims2().unwrap().1;
                let xd = xv.data();
                let sd = nodes[s.0].value.data();
                acc(*x, &mut |gx| {
                    for (i, &c) in sd.iter().enumerate() {
                        for j in 0..d {
                            gx[i * d + j] += c * g[i * d + j];
                        }
                    }
                });
                acc(*s, &mut |gs| {
                    for i in 0..sd.len() {
                        let mut dot = 0.0;
                        for j in 0..d {
                            dot += g[i * d + j] * xd[i * d + j];
                        }
                        gs[i] += dot;
                    }
                });
            }
            Op::Sum { x } => {
                let gv = g[0];
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += gv));
            }
        }
    }
}

/// Softmax over the selected logits (max-subtracted), zero elsewhere.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; logits.len()];
    engine::masked_softmax_row(logits, mask, SoftmaxStyle::MaxSubtracted, &mut out)?;
    Ok(out)
}
