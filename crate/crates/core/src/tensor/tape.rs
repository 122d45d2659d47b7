use super::{Scalar, Tensor};
use crate::error::{bail, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Public op selector for [`Tape::forward_op`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    MatMul,
    Conv2d { padding: usize },
    Add,
    Mul,
    Relu,
    Reshape(Vec<usize>),
    Mean,
    LogSumExp,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv2d { x: usize, w: usize, padding: usize },
    Add { a: usize, b: usize },
    AddBias { x: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, k: f64 },
    Relu { x: usize },
    Reshape { x: usize },
    Slice { x: usize, offset: usize },
    Mean { x: usize },
    Sum { x: usize },
    SumRows { x: usize, cols: usize },
    LogSumExp { x: usize, cols: usize },
    LogSoftmax { x: usize, cols: usize },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Nodes only reference earlier nodes, so
/// reverse insertion order is a valid topological order for backward.
#[derive(Debug, Clone)]
pub struct Tape<T = f64> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T = f64> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros of length `len` if no path reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?.with_grad()))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &str, shape: Vec<usize>, data: Vec<T>, op: Op, inputs: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape, data)?;
        if !value.all_finite() {
            bail!(Numerics, "{name} produced a non-finite value");
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    /// Dispatches one of the public op kinds.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul | OpKind::Conv2d { .. } | OpKind::Add | OpKind::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            bail!(Shape, "{kind:?} takes {arity} inputs, got {}", inputs.len());
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Conv2d { padding } => self.conv2d(inputs[0], inputs[1], padding),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Relu => self.relu(inputs[0]),
            OpKind::Reshape(shape) => self.reshape(inputs[0], shape),
            OpKind::Mean => self.mean(inputs[0]),
            OpKind::LogSumExp => self.logsumexp(inputs[0]),
        }
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            bail!(Shape, "matmul {sa:?} × {sb:?}");
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.record("matmul", vec![m, n], out, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0])
    }

    /// Stride-1 convolution with symmetric zero padding.
    /// `x: [N, C, H, W]`, `w: [O, C, KH, KW]` → `[N, O, H + 2p - KH + 1, W + 2p - KW + 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            bail!(Shape, "conv2d input {sx:?} with kernel {sw:?}");
        }
        let g = ConvGeom::new(&sx, &sw, padding)?;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); g.n * g.o * g.oh * g.ow];
        g.for_each(|oi, xi, wi| out[oi] += xd[xi] * wd[wi]);
        self.record("conv2d", vec![g.n, g.o, g.oh, g.ow], out, Op::Conv2d { x: x.0, w: w.0, padding }, &[x.0, w.0])
    }

    /// Elementwise sum. `b` may also be a rank-1 bias whose length matches
    /// dimension 1 of `a`; it is then broadcast over every other axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
            return self.record("add", sa, out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]);
        }
        if sa.len() >= 2 && sb.len() == 1 && sb[0] == sa[1] {
            let inner: usize = sa[2..].iter().product();
            let channels = sa[1];
            let bd = self.value(b).data();
            let out = self
                .value(a)
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + bd[(i / inner) % channels])
                .collect();
            return self.record("add", sa, out, Op::AddBias { x: a.0, b: b.0 }, &[a.0, b.0]);
        }
        bail!(Shape, "add {sa:?} + {sb:?}")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        self.record("sub", sa, out, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        self.record("mul", sa, out, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| v.scale(k)).collect();
        self.record("scale", self.shape(x).to_vec(), out, Op::Scale { x: x.0, k }, &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v.re() > 0.0 { v } else { T::zero() })
            .collect();
        self.record("relu", self.shape(x).to_vec(), out, Op::Relu { x: x.0 }, &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            bail!(Shape, "cannot reshape {:?} into {shape:?}", self.shape(x));
        }
        let out = self.value(x).data().to_vec();
        self.record("reshape", shape, out, Op::Reshape { x: x.0 }, &[x.0])
    }

    /// Contiguous sub-range of the flattened input, viewed with `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        let total = self.value(x).numel();
        if offset + numel > total {
            bail!(Shape, "slice [{offset}, {}) out of bounds for {total} elements", offset + numel);
        }
        let out = self.value(x).data()[offset..offset + numel].to_vec();
        self.record("slice", shape, out, Op::Slice { x: x.0, offset }, &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).data();
        let total = d.iter().fold(T::zero(), |acc, &v| acc + v);
        let out = total.scale(1.0 / d.len() as f64);
        self.record("mean", vec![1], vec![out], Op::Mean { x: x.0 }, &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.record("sum", vec![1], vec![total], Op::Sum { x: x.0 }, &[x.0])
    }

    /// Sums each row of a `[rows, cols]` matrix into a `[rows]` vector.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("sum_rows", x)?;
        let d = self.value(x).data();
        let out = (0..rows)
            .map(|r| d[r * cols..(r + 1) * cols].iter().fold(T::zero(), |acc, &v| acc + v))
            .collect();
        self.record("sum_rows", vec![rows], out, Op::SumRows { x: x.0, cols }, &[x.0])
    }

    /// Row-wise `log Σ exp` of a `[rows, cols]` matrix, max-shifted for stability.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("logsumexp", x)?;
        let d = self.value(x).data();
        let out = (0..rows).map(|r| logsumexp_row(&d[r * cols..(r + 1) * cols])).collect();
        self.record("logsumexp", vec![rows], out, Op::LogSumExp { x: x.0, cols }, &[x.0])
    }

    /// Row-wise `z − logsumexp(z)` of a `[rows, cols]` matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("log_softmax", x)?;
        let d = self.value(x).data();
        let out = (0..rows).flat_map(|r| log_softmax_row(&d[r * cols..(r + 1) * cols])).collect();
        self.record("log_softmax", vec![rows, cols], out, Op::LogSoftmax { x: x.0, cols }, &[x.0])
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            bail!(Shape, "{name} {sa:?} vs {sb:?}");
        }
        Ok(sa.to_vec())
    }

    fn matrix_dims(&self, name: &str, x: Var) -> Result<(usize, usize)> {
        match *self.shape(x) {
            [r, c] => Ok((r, c)),
            ref s => bail!(Shape, "{name} expects a matrix, got {s:?}"),
        }
    }

    /// Reverse pass from a scalar loss. Fills the grad slot of every
    /// gradient-tracking leaf and returns all node gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            bail!(Shape, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        let grads = self.backward_seeded(loss, vec![T::one()])?;
        for (node, g) in self.nodes.iter_mut().zip(&grads.grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let len = node.value.numel();
                node.value.set_grad(g.clone().unwrap_or_else(|| vec![T::zero(); len]));
            }
        }
        Ok(grads)
    }

    /// Vector-Jacobian product: back-propagates `seed` (shaped like `output`).
    pub fn backward_seeded(&self, output: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        if seed.len() != self.value(output).numel() {
            bail!(Shape, "seed length {} for output of {} elements", seed.len(), self.value(output).numel());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (ad, bd) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                if let Some(da) = self.slot(a, grads) {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc += g[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                }
                if let Some(db) = self.slot(b, grads) {
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, padding } => {
                let geom = ConvGeom::new(self.nodes[x].value.shape(), self.nodes[w].value.shape(), padding)
                    .expect("geometry validated at record time");
                let (xd, wd) = (self.nodes[x].value.data(), self.nodes[w].value.data());
                if let Some(dx) = self.slot(x, grads) {
                    geom.for_each(|oi, xi, wi| dx[xi] += g[oi] * wd[wi]);
                }
                if let Some(dw) = self.slot(w, grads) {
                    geom.for_each(|oi, xi, wi| dw[wi] += g[oi] * xd[xi]);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(a, grads, |d| add_into(d, g));
                self.accumulate(b, grads, |d| add_into(d, g));
            }
            Op::AddBias { x, b } => {
                self.accumulate(x, grads, |d| add_into(d, g));
                let shape = node.value.shape();
                let channels = shape[1];
                let inner: usize = shape[2..].iter().product();
                self.accumulate(b, grads, |d| {
                    for (i, &gv) in g.iter().enumerate() {
                        d[(i / inner) % channels] += gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accumulate(a, grads, |d| add_into(d, g));
                self.accumulate(b, grads, |d| {
                    for (o, &gv) in d.iter_mut().zip(g) {
                        *o += -gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                self.accumulate(a, grads, |d| {
                    for ((o, &gv), &bv) in d.iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                });
                self.accumulate(b, grads, |d| {
                    for ((o, &gv), &av) in d.iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale { x, k } => self.accumulate(x, grads, |d| {
                for (o, &gv) in d.iter_mut().zip(g) {
                    *o += gv.scale(k);
                }
            }),
            Op::Relu { x } => {
                let xd = self.nodes[x].value.data();
                self.accumulate(x, grads, |d| {
                    for ((o, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        if xv.re() > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Reshape { x } => self.accumulate(x, grads, |d| add_into(d, g)),
            Op::Slice { x, offset } => self.accumulate(x, grads, |d| add_into(&mut d[offset..offset + g.len()], g)),
            Op::Mean { x } => {
                let share = g[0].scale(1.0 / self.nodes[x].value.numel() as f64);
                self.accumulate(x, grads, |d| d.iter_mut().for_each(|o| *o += share));
            }
            Op::Sum { x } => self.accumulate(x, grads, |d| d.iter_mut().for_each(|o| *o += g[0])),
            Op::SumRows { x, cols } => self.accumulate(x, grads, |d| {
                for (i, o) in d.iter_mut().enumerate() {
                    *o += g[i / cols];
                }
            }),
            Op::LogSumExp { x, cols } => {
                let xd = self.nodes[x].value.data();
                let out = node.value.data();
                self.accumulate(x, grads, |d| {
                    for (i, o) in d.iter_mut().enumerate() {
                        let r = i / cols;
                        *o += g[r] * (xd[i] - out[r]).exp();
                    }
                });
            }
            Op::LogSoftmax { x, cols } => {
                let out = node.value.data();
                self.accumulate(x, grads, |d| {
                    for r in 0..d.len() / cols {
                        let row = r * cols..(r + 1) * cols;
                        let total = g[row.clone()].iter().fold(T::zero(), |acc, &v| acc + v);
                        for i in row {
                            d[i] += g[i] - out[i].exp() * total;
                        }
                    }
                });
            }
        }
    }

    fn slot<'g>(&self, input: usize, grads: &'g mut [Option<Vec<T>>]) -> Option<&'g mut Vec<T>> {
        if !self.nodes[input].requires_grad {
            return None;
        }
        let len = self.nodes[input].value.numel();
        Some(grads[input].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn accumulate(&self, input: usize, grads: &mut [Option<Vec<T>>], f: impl FnOnce(&mut [T])) {
        if let Some(d) = self.slot(input, grads) {
            f(d);
        }
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

/// `z − logsumexp(z)` for one row; shared by the tape op and the f64 helpers
/// so that both paths round identically.
pub(crate) fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let lse = logsumexp_row(row);
    row.iter().map(|&v| v - lse).collect()
}

pub(crate) fn logsumexp_row<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(row[0], |m, v| if v.re() > m.re() { v } else { m });
    let total = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + total.ln()
}

/// Index bookkeeping shared by the conv forward and backward loops.
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(sx: &[usize], sw: &[usize], pad: usize) -> Result<Self> {
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!("kernel {kh}×{kw} larger than padded input {h}×{w} (pad {pad})")));
        }
        Ok(Self { n, c, h, w, o, kh, kw, oh: h + 2 * pad - kh + 1, ow: w + 2 * pad - kw + 1, pad })
    }

    /// Calls `f(out_index, input_index, weight_index)` for every in-bounds tap.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.n {
            for oc in 0..self.o {
                for i in 0..self.oh {
                    for j in 0..self.ow {
                        let oi = ((b * self.o + oc) * self.oh + i) * self.ow + j;
                        for ic in 0..self.c {
                            for u in 0..self.kh {
                                let Some(y) = (i + u).checked_sub(self.pad).filter(|&y| y < self.h) else { continue };
                                for v in 0..self.kw {
                                    let Some(xx) = (j + v).checked_sub(self.pad).filter(|&xx| xx < self.w) else {
                                        continue;
                                    };
                                    let xi = ((b * self.c + ic) * self.h + y) * self.w + xx;
                                    let wi = ((oc * self.c + ic) * self.kh + u) * self.kw + v;
                                    f(oi, xi, wi);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
