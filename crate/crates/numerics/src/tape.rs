//! Reverse-mode differentiation over a linear tape.
//!
//! Values are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep. Nodes whose
//! inputs are all untracked record no backward closure.

use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, Tensor};
use crate::{NumericsError, Result};

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Rc<Tensor>,
    tracked: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by one backward sweep, indexed by tape position.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads[v.id]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.id].clone(), g.clone()).expect("grad shape"))
    }

    pub fn raw(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads[v.id].as_deref()
    }
}

fn shape_err(msg: impl Into<String>) -> NumericsError {
    NumericsError::Shape(msg.into())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a value that gradients flow into.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t.clone(), true)
    }

    /// Records a value that is excluded from differentiation.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, false)
    }

    /// Records `t` as tracked or not according to its own `requires_grad` flag.
    pub fn input(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t.clone(), t.requires_grad())
    }

    fn leaf(&self, t: Tensor, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            tracked,
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let tracked = parents.iter().any(|p| nodes[p.id].tracked);
        nodes.push(Node {
            value: Rc::new(value),
            tracked,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if tracked {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Populates gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id].value.shape().to_vec();
        if numel(&loss_shape) != 1 {
            return Err(NumericsError::NotScalar(loss_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(g_out) = grads[id].take() else {
                continue;
            };
            let parent_grads = back(&g_out);
            grads[id] = Some(g_out);
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(pg), true) = (pg, nodes[pid].tracked) else {
                    continue;
                };
                match &mut grads[pid] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    pub fn scalar(&self) -> f64 {
        self.value().data()[0]
    }

    fn same_shape(&self, other: &Var<'t>, op: &str) -> Result<Vec<usize>> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(shape_err(format!("{op}: {a:?} vs {b:?}")));
        }
        Ok(a)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let shape = self.same_shape(&other, "add")?;
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(self.tape.push(Tensor::new(shape, data)?, &[self, other], |g| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let shape = self.same_shape(&other, "sub")?;
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Ok(self.tape.push(Tensor::new(shape, data)?, &[self, other], |g| {
            vec![Some(g.to_vec()), Some(g.iter().map(|x| -x).collect())]
        }))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let shape = self.same_shape(&other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Ok(self.tape.push(Tensor::new(shape, data)?, &[self, other], move |g| {
            let ga = g.iter().zip(b.data()).map(|(g, y)| g * y).collect();
            let gb = g.iter().zip(a.data()).map(|(g, x)| g * x).collect();
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * c).collect();
        Ok(self
            .tape
            .push(Tensor::new(a.shape().to_vec(), data)?, &[self], move |g| {
                vec![Some(g.iter().map(|x| x * c).collect())]
            }))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (s, bs) = (self.shape(), bias.shape());
        if s.len() != 2 || bs != [s[1]] {
            return Err(shape_err(format!("add_row: {s:?} + {bs:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let (a, b) = (self.value(), bias.value());
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
        Ok(self.tape.push(Tensor::new(s, data)?, &[self, bias], move |g| {
            let mut gb = vec![0.0; n];
            for row in g.chunks(n).take(m) {
                gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            vec![Some(g.to_vec()), Some(gb)]
        }))
    }

    /// `[m, k] · [k, n] -> [m, n]`
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (a, b) = (self.value(), other.value());
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(a.data(), b.data(), &mut out, m, k, n);
        Ok(self
            .tape
            .push(Tensor::new(vec![m, n], out)?, &[self, other], move |g| {
                let bt = kernels::transpose(b.data(), k, n);
                let mut ga = vec![0.0; m * k];
                kernels::gemm_acc(g, &bt, &mut ga, m, n, k);
                let at = kernels::transpose(a.data(), m, k);
                let mut gb = vec![0.0; k * n];
                kernels::gemm_acc(&at, g, &mut gb, k, m, n);
                vec![Some(ga), Some(gb)]
            }))
    }

    /// Fully connected layer: `x[N, in] · w[out, in]ᵀ + b[out]`.
    pub fn linear(self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(shape_err(format!("linear: x {sx:?}, w {sw:?}")));
        }
        if let Some(b) = &b {
            if b.shape() != [sw[0]] {
                return Err(shape_err(format!("linear bias {:?}", b.shape())));
            }
        }
        let (n, inp, out) = (sx[0], sx[1], sw[0]);
        let (xv, wv) = (self.value(), w.value());
        let wt = kernels::transpose(wv.data(), out, inp);
        let mut y = vec![0.0; n * out];
        kernels::gemm_acc(xv.data(), &wt, &mut y, n, inp, out);
        let mut parents = vec![self, w];
        if let Some(b) = b {
            let bv = b.value();
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(bv.data()).for_each(|(a, c)| *a += c);
            }
            parents.push(b);
        }
        let has_bias = parents.len() == 3;
        Ok(self
            .tape
            .push(Tensor::new(vec![n, out], y)?, &parents, move |g| {
                let mut gx = vec![0.0; n * inp];
                kernels::gemm_acc(g, wv.data(), &mut gx, n, out, inp);
                let gt = kernels::transpose(g, n, out);
                let mut gw = vec![0.0; out * inp];
                kernels::gemm_acc(&gt, xv.data(), &mut gw, out, n, inp);
                let mut res = vec![Some(gx), Some(gw)];
                if has_bias {
                    let mut gb = vec![0.0; out];
                    for row in g.chunks(out) {
                        gb.iter_mut().zip(row).for_each(|(a, c)| *a += c);
                    }
                    res.push(Some(gb));
                }
                res
            }))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        Ok(self
            .tape
            .push(Tensor::new(a.shape().to_vec(), data)?, &[self], move |g| {
                let gx = g
                    .iter()
                    .zip(a.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![Some(gx)]
            }))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let a = self.value();
        let y: Vec<f64> = a.data().iter().map(|&x| sigmoid(x)).collect();
        let yc = y.clone();
        Ok(self
            .tape
            .push(Tensor::new(a.shape().to_vec(), y)?, &[self], move |g| {
                let gx = g.iter().zip(&yc).map(|(g, y)| g * y * (1.0 - y)).collect();
                vec![Some(gx)]
            }))
    }

    /// Scales each row of a matrix to unit root-mean-square:
    /// `y = x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm_rows(self, eps: f64) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape().to_vec();
        if shape.len() != 2 || shape[1] == 0 {
            return Err(shape_err(format!("rms_norm_rows needs a non-empty matrix, got {shape:?}")));
        }
        let cols = shape[1];
        let mut y = vec![0.0; a.numel()];
        let mut inv = Vec::with_capacity(shape[0]);
        for (xr, yr) in a.data().chunks(cols).zip(y.chunks_mut(cols)) {
            let ms = xr.iter().map(|x| x * x).sum::<f64>() / cols as f64;
            let r = 1.0 / (ms + eps).sqrt();
            for (o, x) in yr.iter_mut().zip(xr) {
                *o = x * r;
            }
            inv.push(r);
        }
        let yc = y.clone();
        Ok(self.tape.push(Tensor::new(shape, y)?, &[self], move |g| {
            let mut gx = vec![0.0; g.len()];
            for (k, r) in inv.iter().enumerate() {
                let span = k * cols..(k + 1) * cols;
                let (gr, yr) = (&g[span.clone()], &yc[span.clone()]);
                let dot = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                for ((o, g), y) in gx[span].iter_mut().zip(gr).zip(yr) {
                    *o = r * (g - y * dot);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let t = (*a).clone().reshape(shape)?;
        Ok(self.tape.push(t, &[self], |g| vec![Some(g.to_vec())]))
    }

    /// Gathers slices along `axis` (indices may repeat); the adjoint scatter-adds.
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let out = a.select(axis, indices)?;
        let shape = a.shape().to_vec();
        let dim = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let idx = indices.to_vec();
        let total = a.numel();
        Ok(self.tape.push(out, &[self], move |g| {
            let mut gx = vec![0.0; total];
            let mut pos = 0;
            for o in 0..outer {
                for &i in &idx {
                    let dst = (o * dim + i) * inner;
                    gx[dst..dst + inner]
                        .iter_mut()
                        .zip(&g[pos..pos + inner])
                        .for_each(|(a, b)| *a += b);
                    pos += inner;
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let a = self.value();
        let s = a.data().iter().sum();
        let n = a.numel();
        Ok(self
            .tape
            .push(Tensor::scalar(s), &[self], move |g| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel().max(1) as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Mean squared error between two same-shaped values.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&target, "mse")?;
        let d = self.sub(target)?;
        d.mul(d)?.mean()
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err(format!(
                "cross entropy: logits {s:?}, {} labels",
                labels.len()
            )));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err(format!("label {bad} out of range for {k} classes")));
        }
        let a = self.value();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, row) in a.data().chunks(k).enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - mx).exp() / z;
            }
            loss -= row[labels[i]] - mx - z.ln();
        }
        loss /= n as f64;
        let labels = labels.to_vec();
        Ok(self.tape.push(Tensor::scalar(loss), &[self], move |g| {
            let scale = g[0] / n as f64;
            let mut gx = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                gx[i * k + l] -= 1.0;
            }
            gx.iter_mut().for_each(|x| *x *= scale);
            vec![Some(gx)]
        }))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat of zero tensors"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(shape_err(format!("concat axis {axis} for {base:?}")));
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        for s in &shapes {
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(shape_err(format!("concat: {s:?} vs {base:?} on axis {axis}")));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = shapes.iter().map(|s| s[axis] * inner).collect();
        let total_w: usize = widths.iter().sum();
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut data = Vec::with_capacity(outer * total_w);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        Ok(first.tape.push(Tensor::new(shape, data)?, parts, move |g| {
            let mut out: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(outer * w)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (o, &w) in out.iter_mut().zip(&widths) {
                    o.extend_from_slice(&g[pos..pos + w]);
                    pos += w;
                }
            }
            out.into_iter().map(Some).collect()
        }))
    }

    /// Grouped 2-D convolution over `[N, C, H, W]` with weights `[O, C/groups, kh, kw]`.
    pub fn conv2d(
        self,
        w: Var<'t>,
        b: Option<Var<'t>>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Var<'t>> {
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 4 || groups == 0 {
            return Err(shape_err(format!("conv2d: x {sx:?}, w {sw:?}, groups {groups}")));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, cg, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if c % groups != 0 || o % groups != 0 || cg != c / groups {
            return Err(shape_err(format!(
                "conv2d: {c} input channels, {o} filters of depth {cg}, {groups} groups"
            )));
        }
        if let Some(b) = &b {
            if b.shape() != [o] {
                return Err(shape_err(format!("conv2d bias {:?}", b.shape())));
            }
        }
        let geom = ConvGeom {
            channels: cg,
            height: h,
            width: wd,
            kernel: (kh, kw),
            stride,
            padding,
        };
        let (oh, ow) = geom.out_hw();
        if oh == 0 || ow == 0 {
            return Err(shape_err(format!(
                "conv2d: kernel {kh}x{kw} does not fit {h}x{wd} with padding {padding:?}"
            )));
        }
        let og = o / groups;
        let kdim = geom.patch_len();
        let hw = oh * ow;
        let (xv, wv) = (self.value(), w.value());
        let mut y = vec![0.0; n * o * hw];
        for s in 0..n {
            for gi in 0..groups {
                let img = &xv.data()[(s * c + gi * cg) * h * wd..(s * c + (gi + 1) * cg) * h * wd];
                let cols = kernels::im2col(img, &geom);
                let wg = &wv.data()[gi * og * kdim..(gi + 1) * og * kdim];
                let dst = &mut y[(s * o + gi * og) * hw..(s * o + (gi + 1) * og) * hw];
                kernels::gemm_acc(wg, &cols, dst, og, kdim, hw);
            }
        }
        let mut parents = vec![self, w];
        if let Some(b) = b {
            let bv = b.value();
            for s in 0..n {
                for ch in 0..o {
                    let bias = bv.data()[ch];
                    y[(s * o + ch) * hw..(s * o + ch + 1) * hw]
                        .iter_mut()
                        .for_each(|v| *v += bias);
                }
            }
            parents.push(b);
        }
        let has_bias = parents.len() == 3;
        Ok(self
            .tape
            .push(Tensor::new(vec![n, o, oh, ow], y)?, &parents, move |g| {
                let mut gx = vec![0.0; n * c * h * wd];
                let mut gw = vec![0.0; o * kdim];
                for s in 0..n {
                    for gi in 0..groups {
                        let img = &xv.data()
                            [(s * c + gi * cg) * h * wd..(s * c + (gi + 1) * cg) * h * wd];
                        let cols = kernels::im2col(img, &geom);
                        let g_out = &g[(s * o + gi * og) * hw..(s * o + (gi + 1) * og) * hw];
                        let cols_t = kernels::transpose(&cols, kdim, hw);
                        kernels::gemm_acc(
                            g_out,
                            &cols_t,
                            &mut gw[gi * og * kdim..(gi + 1) * og * kdim],
                            og,
                            hw,
                            kdim,
                        );
                        let wt = kernels::transpose(
                            &wv.data()[gi * og * kdim..(gi + 1) * og * kdim],
                            og,
                            kdim,
                        );
                        let mut gcols = vec![0.0; kdim * hw];
                        kernels::gemm_acc(&wt, g_out, &mut gcols, kdim, og, hw);
                        kernels::col2im(
                            &gcols,
                            &geom,
                            &mut gx[(s * c + gi * cg) * h * wd..(s * c + (gi + 1) * cg) * h * wd],
                        );
                    }
                }
                let mut res = vec![Some(gx), Some(gw)];
                if has_bias {
                    let mut gb = vec![0.0; o];
                    for s in 0..n {
                        for (ch, acc) in gb.iter_mut().enumerate() {
                            *acc += g[(s * o + ch) * hw..(s * o + ch + 1) * hw].iter().sum::<f64>();
                        }
                    }
                    res.push(Some(gb));
                }
                res
            }))
    }

    pub fn maxpool2d(
        self,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var<'t>> {
        self.pool2d(kernel, stride, padding, PoolKind::Max)
    }

    /// Average pooling; padded positions count toward the divisor.
    pub fn avgpool2d(
        self,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var<'t>> {
        self.pool2d(kernel, stride, padding, PoolKind::Avg)
    }

    fn pool2d(
        self,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        kind: PoolKind,
    ) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(shape_err(format!("pool2d expects NCHW, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = kernels::out_extent(h, w, kernel, stride, padding);
        if oh == 0 || ow == 0 || padding.0 >= kernel.0 || padding.1 >= kernel.1 {
            return Err(shape_err(format!(
                "pool2d: window {kernel:?} with padding {padding:?} does not fit {h}x{w}"
            )));
        }
        let xv = self.value();
        let planes = n * c;
        let mut y = vec![0.0; planes * oh * ow];
        // Max: source index per output; Avg: unused.
        let mut arg = vec![usize::MAX; if kind == PoolKind::Max { y.len() } else { 0 }];
        let area = (kernel.0 * kernel.1) as f64;
        for p in 0..planes {
            let plane = &xv.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    let mut acc = 0.0;
                    for ki in 0..kernel.0 {
                        let iy = (oy * stride.0 + ki) as isize - padding.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel.1 {
                            let ix = (ox * stride.1 + kj) as isize - padding.1 as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            let v = plane[idx];
                            acc += v;
                            if v > best {
                                best = v;
                                best_i = idx;
                            }
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    match kind {
                        PoolKind::Max => {
                            y[o] = best;
                            arg[o] = p * h * w + best_i;
                        }
                        PoolKind::Avg => y[o] = acc / area,
                    }
                }
            }
        }
        let total = xv.numel();
        Ok(self
            .tape
            .push(Tensor::new(vec![n, c, oh, ow], y)?, &[self], move |g| {
                let mut gx = vec![0.0; total];
                match kind {
                    PoolKind::Max => {
                        for (o, &src) in arg.iter().enumerate() {
                            gx[src] += g[o];
                        }
                    }
                    PoolKind::Avg => {
                        for p in 0..planes {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g[(p * oh + oy) * ow + ox] / area;
                                    for ki in 0..kernel.0 {
                                        let iy = (oy * stride.0 + ki) as isize - padding.0 as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kj in 0..kernel.1 {
                                            let ix =
                                                (ox * stride.1 + kj) as isize - padding.1 as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            gx[p * h * w + iy as usize * w + ix as usize] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }))
    }

    /// `[N, C, H, W] -> [N, C, 1, 1]`
    pub fn global_avgpool(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(shape_err(format!("global_avgpool expects NCHW, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xv = self.value();
        let y: Vec<f64> = xv
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self
            .tape
            .push(Tensor::new(vec![n, c, 1, 1], y)?, &[self], move |g| {
                let gx = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat(gv / hw as f64).take(hw))
                    .collect();
                vec![Some(gx)]
            }))
    }

    /// Per-channel affine map `y = scale[c]·x + shift[c]` over `[N, C, ...]`.
    pub fn channel_affine(self, scale: Var<'t>, shift: Var<'t>) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() < 2 || scale.shape() != [s[1]] || shift.shape() != [s[1]] {
            return Err(shape_err(format!(
                "channel_affine: x {s:?}, scale {:?}, shift {:?}",
                scale.shape(),
                shift.shape()
            )));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let (xv, sv, bv) = (self.value(), scale.value(), shift.value());
        let mut y = xv.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let (a, b) = (sv.data()[ch], bv.data()[ch]);
                y[(i * c + ch) * inner..(i * c + ch + 1) * inner]
                    .iter_mut()
                    .for_each(|v| *v = a * *v + b);
            }
        }
        Ok(self
            .tape
            .push(Tensor::new(s, y)?, &[self, scale, shift], move |g| {
                let mut gx = vec![0.0; g.len()];
                let mut gs = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let range = (i * c + ch) * inner..(i * c + ch + 1) * inner;
                        let a = sv.data()[ch];
                        for idx in range {
                            gx[idx] = g[idx] * a;
                            gs[ch] += g[idx] * xv.data()[idx];
                            gb[ch] += g[idx];
                        }
                    }
                }
                vec![Some(gx), Some(gs), Some(gb)]
            }))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum PoolKind {
    Max,
    Avg,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
