//! Reverse-mode gradient tape.
//!
//! Values are recorded in evaluation order, so every node's parents precede
//! it and a single reverse sweep visits each node once. Operations that only
//! touch constants record no backward rule.
//!
//! Domain-specific operations (normalization, rotary encoding, attention,
//! convolution, selective scan) add their own `impl Tape` blocks in the
//! modules that own the kernels.

use crate::error::{Error, Result};
use crate::tensor::{gemm, sigmoid, softplus, Precision, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `(upstream grad, parent values, own value) -> grad per parent`.
pub(crate) type Backward = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    requires_grad: bool,
    backward: Option<Backward>,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    precision: Precision,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::Double)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        self.precision.round(value.data_mut());
        self.nodes.push(Node { value, parents: Vec::new(), requires_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn push(
        &mut self,
        op: &'static str,
        mut value: Tensor,
        parents: &[Var],
        backward: Backward,
    ) -> Result<Var> {
        value.ensure_finite(op)?;
        self.precision.round(value.data_mut());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates d`loss`/d`node` to every node that tracks gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parent_values: Vec<&Tensor> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = backward(&g, &parent_values, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(mut pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                if !pg.is_finite() {
                    return Err(Error::NonFinite("backward"));
                }
                self.precision.round(pg.data_mut());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(
            op,
            out,
            &[a],
            Box::new(move |g, p, y| {
                let data = g
                    .data()
                    .iter()
                    .zip(p[0].data())
                    .zip(y.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::new(g.shape(), data).unwrap())]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", out, &[a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(
            "sub",
            out,
            &[a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(
            "mul",
            out,
            &[a, b],
            Box::new(|g, p, _| {
                vec![
                    Some(g.zip_map(p[1], |g, y| g * y).unwrap()),
                    Some(g.zip_map(p[0], |g, x| g * x).unwrap()),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push("scale", out, &[a], Box::new(move |g, _, _| vec![Some(g.map(|v| v * c))]))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push("add_const", out, &[a], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, |_, y| y)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, crate::tensor::silu, |x, _| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, |x, _| sigmoid(x))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(
            "sum",
            out,
            &[a],
            Box::new(|g, p, _| vec![Some(Tensor::full(p[0].shape(), g.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// `x[..., d] ⊙ w[d]`, broadcast over rows.
    pub fn mul_lastdim(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let d = xv.last_dim();
        if wv.shape() != [d] {
            return Err(Error::dim("mul_lastdim", format!("{:?} vs {:?}", xv.shape(), wv.shape())));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, w) in row.iter_mut().zip(wv.data()) {
                *o *= w;
            }
        }
        self.push(
            "mul_lastdim",
            out,
            &[x, w],
            Box::new(move |g, p, _| {
                let mut gx = g.clone();
                let mut gw = vec![0.0; d];
                for (r, (grow, xrow)) in
                    gx.data_mut().chunks_mut(d).zip(p[0].data().chunks(d)).enumerate()
                {
                    let _ = r;
                    for j in 0..d {
                        gw[j] += grow[j] * xrow[j];
                        grow[j] *= p[1].data()[j];
                    }
                }
                vec![Some(gx), Some(Tensor::new(&[d], gw).unwrap())]
            }),
        )
    }

    /// `x[..., d] + b[d]`, broadcast over rows.
    pub fn add_lastdim(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = xv.last_dim();
        if bv.shape() != [d] {
            return Err(Error::dim("add_lastdim", format!("{:?} vs {:?}", xv.shape(), bv.shape())));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(
            "add_lastdim",
            out,
            &[x, b],
            Box::new(move |g, _, _| {
                let mut gb = vec![0.0; d];
                for row in g.data().chunks(d) {
                    for (a, v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::new(&[d], gb).unwrap())]
            }),
        )
    }

    /// Splits the last axis into `s.len()` equal groups and scales group `i`
    /// by `s[i]`. A one-element `s` is a plain learnable scalar.
    pub fn mul_groups(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let d = xv.last_dim();
        let groups = sv.numel();
        if sv.ndim() != 1 || groups == 0 || d % groups != 0 {
            return Err(Error::dim(
                "mul_groups",
                format!("cannot split {:?} into {:?} groups", xv.shape(), sv.shape()),
            ));
        }
        let gs = d / groups;
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (chunk, s) in row.chunks_mut(gs).zip(sv.data()) {
                chunk.iter_mut().for_each(|v| *v *= s);
            }
        }
        self.push(
            "mul_groups",
            out,
            &[x, s],
            Box::new(move |g, p, _| {
                let mut gx = g.clone();
                let mut gsc = vec![0.0; groups];
                for (grow, xrow) in gx.data_mut().chunks_mut(d).zip(p[0].data().chunks(d)) {
                    for (k, (gc, xc)) in grow.chunks_mut(gs).zip(xrow.chunks(gs)).enumerate() {
                        let s = p[1].data()[k];
                        for (gv, xv) in gc.iter_mut().zip(xc) {
                            gsc[k] += *gv * xv;
                            *gv *= s;
                        }
                    }
                }
                vec![Some(gx), Some(Tensor::new(&[groups], gsc).unwrap())]
            }),
        )
    }

    /// Scales row `i` of `x[n, d]` by `g[i]` (`g` of shape `[n]` or `[n, 1]`).
    pub fn mul_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(g));
        let n = xv.rows();
        if gv.numel() != n {
            return Err(Error::dim("mul_rows", format!("{:?} vs {:?}", xv.shape(), gv.shape())));
        }
        let d = xv.last_dim();
        let mut out = xv.clone();
        for (row, s) in out.data_mut().chunks_mut(d).zip(gv.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        self.push(
            "mul_rows",
            out,
            &[x, g],
            Box::new(move |up, p, _| {
                let mut gx = up.clone();
                let mut gg = vec![0.0; n];
                for (i, (grow, xrow)) in
                    gx.data_mut().chunks_mut(d).zip(p[0].data().chunks(d)).enumerate()
                {
                    let s = p[1].data()[i];
                    for (gv, xv) in grow.iter_mut().zip(xrow) {
                        gg[i] += *gv * xv;
                        *gv *= s;
                    }
                }
                vec![Some(gx), Some(Tensor::new(p[1].shape(), gg).unwrap())]
            }),
        )
    }

    /// `a[..., k] × b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        self.push(
            "matmul",
            out,
            &[a, b],
            Box::new(|g, p, _| {
                let (a, b) = (p[0], p[1]);
                let (k, n) = (b.shape()[0], b.shape()[1]);
                let m = a.rows();
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, b.data(), true, &mut ga, 0.0);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g.data(), false, &mut gb, 0.0);
                vec![
                    Some(Tensor::new(a.shape(), ga).unwrap()),
                    Some(Tensor::new(b.shape(), gb).unwrap()),
                ]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(
            "reshape",
            out,
            &[a],
            Box::new(|g, p, _| vec![Some(g.reshape(p[0].shape()).unwrap())]),
        )
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_lastdim(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        if start + len > d {
            return Err(Error::dim("slice_lastdim", format!("{start}+{len} > {d}")));
        }
        let mut data = Vec::with_capacity(av.rows() * len);
        for row in av.data().chunks(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(&shape, data)?;
        self.push(
            "slice_lastdim",
            out,
            &[a],
            Box::new(move |g, p, _| {
                let mut ga = Tensor::zeros(p[0].shape());
                for (grow, src) in ga.data_mut().chunks_mut(d).zip(g.data().chunks(len)) {
                    grow[start..start + len].copy_from_slice(src);
                }
                vec![Some(ga)]
            }),
        )
    }

    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_lastdim", "no inputs"));
        }
        let rows = self.value(parts[0]).rows();
        let lead: Vec<usize> = {
            let s = self.value(parts[0]).shape();
            s[..s.len() - 1].to_vec()
        };
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat_lastdim", format!("{lead:?} vs {s:?}")));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.clone();
        shape.push(total);
        let out = Tensor::new(&shape, data)?;
        self.push(
            "concat_lastdim",
            out,
            parts,
            Box::new(move |g, p, _| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(p)
                    .map(|(&w, pv)| {
                        let mut gp = Vec::with_capacity(rows * w);
                        for row in g.data().chunks(total) {
                            gp.extend_from_slice(&row[offset..offset + w]);
                        }
                        offset += w;
                        Some(Tensor::new(pv.shape(), gp).unwrap())
                    })
                    .collect()
            }),
        )
    }

    /// Rows `idx` of `x` viewed as `[rows, d]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.last_dim());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of {n}")));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(&[idx.len(), d], data)?;
        let idx = idx.to_vec();
        self.push(
            "gather_rows",
            out,
            &[x],
            Box::new(move |g, p, _| {
                let mut gx = Tensor::zeros(p[0].shape());
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        gx.data_mut()[i * d + j] += g.data()[k * d + j];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Sums rows of `y[n, d]` into a zero `[rows, d]` tensor at `idx`.
    pub fn scatter_rows(&mut self, y: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let yv = self.value(y);
        let d = yv.last_dim();
        if yv.rows() != idx.len() {
            return Err(Error::dim("scatter_rows", format!("{} rows vs {} indices", yv.rows(), idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("scatter_rows", format!("row {bad} out of {rows}")));
        }
        let mut out = Tensor::zeros(&[rows, d]);
        for (k, &i) in idx.iter().enumerate() {
            for j in 0..d {
                out.data_mut()[i * d + j] += yv.data()[k * d + j];
            }
        }
        let idx = idx.to_vec();
        self.push(
            "scatter_rows",
            out,
            &[y],
            Box::new(move |g, _, _| {
                let mut data = Vec::with_capacity(idx.len() * d);
                for &i in &idx {
                    data.extend_from_slice(g.row(i));
                }
                vec![Some(Tensor::new(&[idx.len(), d], data).unwrap())]
            }),
        )
    }

    /// Looks up `ids` in `table[vocab, d]`; output shape is `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(Error::dim("embedding", format!("table shape {:?}", tv.shape())));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        if lead.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("embedding", format!("{} ids for shape {lead:?}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::dim("embedding", format!("token {bad} outside vocabulary {vocab}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let out = Tensor::new(&shape, data)?;
        let ids = ids.to_vec();
        self.push(
            "embedding",
            out,
            &[table],
            Box::new(move |g, p, _| {
                let mut gt = Tensor::zeros(p[0].shape());
                for (k, &i) in ids.iter().enumerate() {
                    let src = &g.data()[k * d..(k + 1) * d];
                    for (a, b) in gt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *a += b;
                    }
                }
                vec![Some(gt)]
            }),
        )
    }

    /// Mean token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.last_dim());
        if rows != targets.len() {
            return Err(Error::dim("cross_entropy", format!("{rows} rows vs {} targets", targets.len())));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy with no scored positions".into()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::dim("cross_entropy", format!("target {bad} outside vocabulary {vocab}")));
        }
        let mut probs = vec![0.0; rows * vocab];
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = lv.row(r);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            p.copy_from_slice(row);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            crate::tensor::softmax_in_place(p);
        }
        let scale = 1.0 / count as f64;
        let targets = targets.to_vec();
        let shape = lv.shape().to_vec();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss * scale),
            &[logits],
            Box::new(move |g, _, _| {
                let mut gl = probs.clone();
                let s = g.item() * scale;
                for (r, t) in targets.iter().enumerate() {
                    let row = &mut gl[r * vocab..(r + 1) * vocab];
                    match t {
                        Some(t) => {
                            row[*t] -= 1.0;
                            row.iter_mut().for_each(|v| *v *= s);
                        }
                        None => row.iter_mut().for_each(|v| *v = 0.0),
                    }
                }
                vec![Some(Tensor::new(&shape, gl).unwrap())]
            }),
        )
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let out = crate::tensor::softmax_lastdim(self.value(a))?;
        self.push(
            "softmax_lastdim",
            out,
            &[a],
            Box::new(|g, _, y| {
                let d = y.last_dim();
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (gv, yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

pub mod gradcheck {
    //! Five-point central differences against the tape.
    use super::*;

    /// Relative error with a small absolute floor so exact zeros compare.
    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Builds the graph with `f` from `inputs`, backpropagates, and compares
    /// every input coordinate to a five-point central difference with step
    /// `h` (fourth-order accurate, so gradients far below the loss scale are
    /// still resolved).
    pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        check_scaled(inputs, h, 1.0, f)
    }

    /// [`check`] with the analytic gradient multiplied by `scale` first;
    /// any scale other than one must be caught.
    pub fn check_scaled<F>(inputs: &[Tensor], h: f64, scale: f64, f: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |vals: &[Tensor]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| t.constant(v.clone())).collect();
            let out = f(&mut t, &vars);
            t.value(out).item()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let mut worst: f64 = 0.0;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            for j in 0..input.numel() {
                let at = |step: f64| {
                    let mut v = inputs.to_vec();
                    v[i].data_mut()[j] += step;
                    eval(&v)
                };
                let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
                let e = rel_err(scale * analytic.data()[j], numeric);
                worst = worst.max(e);
            }
        }
        worst
    }

    /// Contracts `out` against a fixed pseudo-random weighting so that no
    /// gradient cancels by symmetry.
    pub fn weighted_sum(t: &mut Tape, out: Var, seed: u64) -> Var {
        let w = Tensor::randn(t.shape(out), 1.0, &mut crate::rng::Rng::new(seed));
        let wv = t.constant(w);
        let p = t.mul(out, wv).unwrap();
        t.sum(p).unwrap()
    }
}
