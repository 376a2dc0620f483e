//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass in creation order,
//! which is already a topological order. [`Graph::backward`] walks the record
//! in reverse exactly once; gradients are summed into every node that has a
//! differentiable path to a parameter.
//!
//! Two operators exist purely for gradient routing:
//!
//! * [`Graph::stop_gradient`] is the identity forward and cuts the edge
//!   backward. Everything upstream of it sees no gradient through that edge.
//! * [`Graph::gradient_gate`] is the identity forward and, backward, passes the
//!   incoming gradient row `t` only where `keep[t]` is set.

use crate::error::{Error, Result};
use crate::tensor::{gemm, log_softmax_in_place, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    OuterAdd(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    LogSoftmax(Var, usize),
    Embed(Var, Vec<usize>),
    Concat(Var, Var, usize),
    SliceRows(Var, usize),
    Unfold(Var, usize),
    MaskRows(Var, Var, Vec<bool>),
    StopGradient,
    GradientGate(Var, Vec<bool>),
    Sum(Var),
    /// Scalar whose derivative w.r.t. its input was computed by the caller.
    External(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One recorded forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the backward root w.r.t. `v`. `None` means no
    /// gradient reached the node, which is the same as an all-zero gradient.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(v).numel()])
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.expect_matrix(op)
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} · {}x{}", m, k, k2, n),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape("add", format!("{:?} + {:?}", sa, sb)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", value, Op::Add(a, b), rg)
    }

    /// Adds a `1×d` (or length-`d`) row vector to every row of an `n×d` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.mat(a, "add_row")?;
        if self.value(bias).numel() != d {
            return Err(Error::shape(
                "add_row",
                format!(
                    "bias of {} elements for {} columns",
                    self.value(bias).numel(),
                    d
                ),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(
            "add_row",
            Tensor::matrix(n, d, out)?,
            Op::AddRow(a, bias),
            rg,
        )
    }

    /// `out[i * rows(b) + j] = a[i] + b[j]` for `a: n×d`, `b: m×d`, giving `(n·m)×d`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.mat(a, "outer_add")?;
        let (m, d2) = self.mat(b, "outer_add")?;
        if d != d2 {
            return Err(Error::shape(
                "outer_add",
                format!("{}x{} ⊕ {}x{}", n, d, m, d2),
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * m * d);
        for ar in av.chunks(d) {
            for br in bv.chunks(d) {
                out.extend(ar.iter().zip(br).map(|(x, y)| x + y));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "outer_add",
            Tensor::matrix(n * m, d, out)?,
            Op::OuterAdd(a, b),
            rg,
        )
    }

    pub fn mul_elementwise(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape("mul", format!("{:?} * {:?}", sa, sb)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect())?;
        let rg = self.rg(a);
        self.push("scale", value, Op::Scale(a, s), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let value = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|x| x.tanh()).collect(),
        )?;
        let rg = self.rg(a);
        self.push("tanh", value, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let value = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|x| x.max(0.0)).collect(),
        )?;
        let rg = self.rg(a);
        self.push("relu", value, Op::Relu(a), rg)
    }

    /// Log-softmax of a matrix along `axis` (0 normalizes columns, 1 rows).
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.mat(a, "log_softmax")?;
        let mut out = self.value(a).data().to_vec();
        match axis {
            1 => out.chunks_mut(c.max(1)).for_each(log_softmax_in_place),
            0 => {
                let mut col = vec![0.0; r];
                for j in 0..c {
                    (0..r).for_each(|i| col[i] = out[i * c + j]);
                    log_softmax_in_place(&mut col);
                    (0..r).for_each(|i| out[i * c + j] = col[i]);
                }
            }
            _ => {
                return Err(Error::shape(
                    "log_softmax",
                    format!("axis {} of a matrix", axis),
                ))
            }
        }
        let rg = self.rg(a);
        self.push(
            "log_softmax",
            Tensor::matrix(r, c, out)?,
            Op::LogSoftmax(a, axis),
            rg,
        )
    }

    /// Gathers rows of `table` (`n×d`) by index, giving `len(indices)×d`.
    pub fn embed_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = self.mat(table, "embed_lookup")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "embed_lookup",
                format!("index {} into {} rows", bad, n),
            ));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        indices
            .iter()
            .for_each(|&i| out.extend_from_slice(t.row(i)));
        let rg = self.rg(table);
        let value = Tensor::matrix(indices.len(), d, out)?;
        self.push(
            "embed_lookup",
            value,
            Op::Embed(table, indices.to_vec()),
            rg,
        )
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ra, ca) = self.mat(a, "concat")?;
        let (rb, cb) = self.mat(b, "concat")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let value = match axis {
            0 if ca == cb => {
                let mut out = av.to_vec();
                out.extend_from_slice(bv);
                Tensor::matrix(ra + rb, ca, out)?
            }
            1 if ra == rb => {
                let mut out = Vec::with_capacity(ra * (ca + cb));
                for i in 0..ra {
                    out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
                    out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
                }
                Tensor::matrix(ra, ca + cb, out)?
            }
            _ => {
                return Err(Error::shape(
                    "concat",
                    format!("{}x{} with {}x{} on axis {}", ra, ca, rb, cb, axis),
                ))
            }
        };
        let rg = self.rg(a) || self.rg(b);
        self.push("concat", value, Op::Concat(a, b, axis), rg)
    }

    /// Rows `t0..t1` of a matrix.
    pub fn slice_time(&mut self, a: Var, t0: usize, t1: usize) -> Result<Var> {
        let (r, c) = self.mat(a, "slice_time")?;
        if t0 > t1 || t1 > r {
            return Err(Error::shape(
                "slice_time",
                format!("rows {}..{} of {}", t0, t1, r),
            ));
        }
        let out = self.value(a).data()[t0 * c..t1 * c].to_vec();
        let rg = self.rg(a);
        self.push(
            "slice_time",
            Tensor::matrix(t1 - t0, c, out)?,
            Op::SliceRows(a, t0),
            rg,
        )
    }

    /// Temporal window unfolding for 1-D convolution: `T×C` becomes
    /// `T×(width·C)` where row `t` holds frames `t - width/2 ..= t + width/2`,
    /// zero outside the sequence. `width` must be odd.
    pub fn unfold_time(&mut self, a: Var, width: usize) -> Result<Var> {
        let (t_len, c) = self.mat(a, "unfold_time")?;
        if width % 2 == 0 {
            return Err(Error::shape(
                "unfold_time",
                format!("even window width {}", width),
            ));
        }
        let half = width / 2;
        let x = self.value(a).data();
        let mut out = vec![0.0; t_len * width * c];
        for t in 0..t_len {
            let dst = &mut out[t * width * c..(t + 1) * width * c];
            for j in 0..width {
                let src = t + j;
                if src < half || src - half >= t_len {
                    continue;
                }
                let s = src - half;
                dst[j * c..(j + 1) * c].copy_from_slice(&x[s * c..(s + 1) * c]);
            }
        }
        let rg = self.rg(a);
        self.push(
            "unfold_time",
            Tensor::matrix(t_len, width * c, out)?,
            Op::Unfold(a, width),
            rg,
        )
    }

    /// Replaces row `t` of `x` with `fill` wherever `mask[t]` is set.
    pub fn mask_rows(&mut self, x: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.mat(x, "mask_rows")?;
        if mask.len() != r {
            return Err(Error::shape(
                "mask_rows",
                format!("mask of {} for {} rows", mask.len(), r),
            ));
        }
        if self.value(fill).numel() != c {
            return Err(Error::shape(
                "mask_rows",
                format!(
                    "fill of {} elements for {} columns",
                    self.value(fill).numel(),
                    c
                ),
            ));
        }
        let mut out = self.value(x).data().to_vec();
        let f = self.value(fill).data();
        for (row, _) in out.chunks_mut(c).zip(mask).filter(|(_, &m)| m) {
            row.copy_from_slice(f);
        }
        let rg = self.rg(x) || (self.rg(fill) && mask.iter().any(|&m| m));
        let value = Tensor::matrix(r, c, out)?;
        self.push("mask_rows", value, Op::MaskRows(x, fill, mask.to_vec()), rg)
    }

    /// Identity forward; zero derivative backward.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push_unchecked(value, Op::StopGradient, false)
    }

    /// Identity forward; backward passes gradient row `t` only if `keep[t]`.
    pub fn gradient_gate(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (r, _) = self.mat(x, "gradient_gate")?;
        if keep.len() != r {
            return Err(Error::shape(
                "gradient_gate",
                format!("keep of length {} for {} rows", keep.len(), r),
            ));
        }
        let value = self.value(x).clone();
        let rg = self.rg(x);
        Ok(self.push_unchecked(value, Op::GradientGate(x, keep.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Records a scalar `value` computed outside the graph from `input`, along
    /// with its exact derivative `grad` w.r.t. `input`.
    pub fn external_scalar(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(Error::shape(
                "external_scalar",
                format!(
                    "gradient of {} for input of {}",
                    grad.len(),
                    self.value(input).numel()
                ),
            ));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                op: "external_scalar",
            });
        }
        let rg = self.rg(input);
        self.push(
            "external_scalar",
            Tensor::scalar(value),
            Op::External(input, grad),
            rg,
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates d(root)/d(node) to every node. `root` must be a scalar.
    /// A graph can be differentiated once.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(root).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "root must be a scalar, got shape {:?}",
                    self.value(root).shape()
                ),
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&nodes[a.0].value);
                let n = nodes[b.0].value.cols();
                if wants(a) {
                    let ga = acc(grads, *a, m * k);
                    gemm(m, n, k, gout, false, nodes[b.0].value.data(), true, 1.0, ga);
                }
                if wants(b) {
                    let gb = acc(grads, *b, k * n);
                    gemm(k, m, n, nodes[a.0].value.data(), true, gout, false, 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        add_into(acc(grads, *v, gout.len()), gout);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if wants(a) {
                    add_into(acc(grads, *a, gout.len()), gout);
                }
                if wants(bias) {
                    let d = nodes[bias.0].value.numel();
                    let gb = acc(grads, *bias, d);
                    for row in gout.chunks(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::OuterAdd(a, b) => {
                let (n, d) = dims2(&nodes[a.0].value);
                let m = nodes[b.0].value.rows();
                if wants(a) {
                    let ga = acc(grads, *a, n * d);
                    for (t, gr) in ga.chunks_mut(d).enumerate() {
                        for row in gout[t * m * d..(t + 1) * m * d].chunks(d) {
                            add_into(gr, row);
                        }
                    }
                }
                if wants(b) {
                    let gb = acc(grads, *b, m * d);
                    for block in gout.chunks(m * d) {
                        add_into(gb, block);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let bv = nodes[b.0].value.data();
                    let ga = acc(grads, *a, gout.len());
                    ga.iter_mut()
                        .zip(gout.iter().zip(bv))
                        .for_each(|(g, (o, y))| *g += o * y);
                }
                if wants(b) {
                    let av = nodes[a.0].value.data();
                    let gb = acc(grads, *b, gout.len());
                    gb.iter_mut()
                        .zip(gout.iter().zip(av))
                        .for_each(|(g, (o, x))| *g += o * x);
                }
            }
            Op::Scale(a, s) => {
                let ga = acc(grads, *a, gout.len());
                ga.iter_mut().zip(gout).for_each(|(g, o)| *g += s * o);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let ga = acc(grads, *a, gout.len());
                ga.iter_mut()
                    .zip(gout.iter().zip(y))
                    .for_each(|(g, (o, y))| *g += o * (1.0 - y * y));
            }
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                let ga = acc(grads, *a, gout.len());
                ga.iter_mut()
                    .zip(gout.iter().zip(x))
                    .for_each(|(g, (o, x))| *g += if *x > 0.0 { *o } else { 0.0 });
            }
            Op::LogSoftmax(a, axis) => {
                let (r, c) = dims2(&node.value);
                let y = node.value.data();
                let ga = acc(grads, *a, r * c);
                if *axis == 1 {
                    for ((g, o), y) in ga.chunks_mut(c).zip(gout.chunks(c)).zip(y.chunks(c)) {
                        let s: f64 = o.iter().sum();
                        for j in 0..c {
                            g[j] += o[j] - y[j].exp() * s;
                        }
                    }
                } else {
                    for j in 0..c {
                        let s: f64 = (0..r).map(|i| gout[i * c + j]).sum();
                        for i in 0..r {
                            ga[i * c + j] += gout[i * c + j] - y[i * c + j].exp() * s;
                        }
                    }
                }
            }
            Op::Embed(table, indices) => {
                let (n, d) = dims2(&nodes[table.0].value);
                let gt = acc(grads, *table, n * d);
                for (row, &ix) in gout.chunks(d).zip(indices) {
                    add_into(&mut gt[ix * d..(ix + 1) * d], row);
                }
            }
            Op::Concat(a, b, axis) => {
                let (ra, ca) = dims2(&nodes[a.0].value);
                let cb = nodes[b.0].value.cols();
                if *axis == 0 {
                    let split = ra * ca;
                    if wants(a) {
                        add_into(acc(grads, *a, split), &gout[..split]);
                    }
                    if wants(b) {
                        add_into(acc(grads, *b, gout.len() - split), &gout[split..]);
                    }
                } else {
                    let w = ca + cb;
                    if wants(a) {
                        let ga = acc(grads, *a, ra * ca);
                        for (g, o) in ga.chunks_mut(ca.max(1)).zip(gout.chunks(w)) {
                            add_into(g, &o[..ca]);
                        }
                    }
                    if wants(b) {
                        let gb = acc(grads, *b, ra * cb);
                        for (g, o) in gb.chunks_mut(cb.max(1)).zip(gout.chunks(w)) {
                            add_into(g, &o[ca..]);
                        }
                    }
                }
            }
            Op::SliceRows(a, t0) => {
                let (r, c) = dims2(&nodes[a.0].value);
                let ga = acc(grads, *a, r * c);
                add_into(&mut ga[t0 * c..t0 * c + gout.len()], gout);
            }
            Op::Unfold(a, width) => {
                let (t_len, c) = dims2(&nodes[a.0].value);
                let half = width / 2;
                let ga = acc(grads, *a, t_len * c);
                for t in 0..t_len {
                    let src = &gout[t * width * c..(t + 1) * width * c];
                    for j in 0..*width {
                        let p = t + j;
                        if p < half || p - half >= t_len {
                            continue;
                        }
                        let s = p - half;
                        add_into(&mut ga[s * c..(s + 1) * c], &src[j * c..(j + 1) * c]);
                    }
                }
            }
            Op::MaskRows(x, fill, mask) => {
                let c = nodes[x.0].value.cols();
                if wants(x) {
                    let gx = acc(grads, *x, gout.len());
                    for ((g, o), _) in gx
                        .chunks_mut(c)
                        .zip(gout.chunks(c))
                        .zip(mask)
                        .filter(|(_, &m)| !m)
                    {
                        add_into(g, o);
                    }
                }
                if wants(fill) && mask.iter().any(|&m| m) {
                    let gf = acc(grads, *fill, c);
                    for (o, _) in gout.chunks(c).zip(mask).filter(|(_, &m)| m) {
                        add_into(gf, o);
                    }
                }
            }
            Op::GradientGate(x, keep) => {
                let c = nodes[x.0].value.cols();
                let gx = acc(grads, *x, gout.len());
                for ((g, o), _) in gx
                    .chunks_mut(c)
                    .zip(gout.chunks(c))
                    .zip(keep)
                    .filter(|(_, &k)| k)
                {
                    add_into(g, o);
                }
            }
            Op::Sum(a) => {
                let n = nodes[a.0].value.numel();
                acc(grads, *a, n).iter_mut().for_each(|g| *g += gout[0]);
            }
            Op::External(a, local) => {
                let ga = acc(grads, *a, local.len());
                ga.iter_mut()
                    .zip(local)
                    .for_each(|(g, l)| *g += gout[0] * l);
            }
        }
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_dot_product() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 2.0]]));
        let b = g.constant(m(&[&[3.0], &[4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
        assert_eq!(g.value(c).shape(), &[1, 1]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn log_softmax_uniform() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 3]));
        let y = g.log_softmax(a, 1).unwrap();
        for v in g.value(y).data() {
            assert!((v + 3f64.ln()).abs() < 1e-15);
        }
        assert!((g.value(y).data()[0] + 1.0986).abs() < 1e-4);
    }

    #[test]
    fn tanh_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 1]));
        let y = g.tanh(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(f64::MAX));
        let b = g.add(a, a);
        assert!(matches!(b, Err(Error::NonFinite { op: "add" })));
    }

    #[test]
    fn second_backward_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
    }

    #[test]
    fn stop_gradient_examples() {
        let mut g = Graph::new();
        let x = g.param(m(&[&[1.5, -2.0]]));
        let w = g.param(m(&[&[0.3, 0.7]]));
        let sx = g.stop_gradient(x);
        assert_eq!(g.value(sx).data(), &[1.5, -2.0]);
        let p = g.mul_elementwise(sx, w).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad_or_zeros(x), vec![0.0, 0.0]);
        assert_eq!(g.grad(w).unwrap(), &[1.5, -2.0]);
    }

    #[test]
    fn gate_all_true_is_pass_through() {
        let data = m(&[&[0.5, -1.0], &[2.0, 0.25]]);
        let run = |gate: Option<&[bool]>| {
            let mut g = Graph::new();
            let x = g.param(data.clone());
            let h = g.tanh(x).unwrap();
            let h = match gate {
                Some(k) => g.gradient_gate(h, k).unwrap(),
                None => h,
            };
            let sq = g.mul_elementwise(h, h).unwrap();
            let l = g.sum(sq).unwrap();
            g.backward(l).unwrap();
            g.grad_or_zeros(x)
        };
        assert_eq!(run(Some(&[true, true])), run(None));
        assert_eq!(run(Some(&[false, false])), vec![0.0; 4]);
    }

    #[test]
    fn gate_length_mismatch() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[3, 2]));
        assert!(g.gradient_gate(x, &[true, false]).is_err());
    }

    #[test]
    fn gate_forward_is_bitwise_identity() {
        let mut g = Graph::new();
        let x = g.param(m(&[&[0.1, 1e-300], &[-7.25, 3.0]]));
        let y = g.gradient_gate(x, &[false, true]).unwrap();
        let bits = |v: Var, g: &Graph| {
            g.value(v)
                .data()
                .iter()
                .map(|f| f.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(x, &g), bits(y, &g));
    }

    #[test]
    fn unfold_zero_pads() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[1.0], &[2.0], &[3.0]]));
        let u = g.unfold_time(x, 3).unwrap();
        assert_eq!(
            g.value(u).data(),
            &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]
        );
    }

    #[test]
    fn outer_add_layout() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0], &[2.0]]));
        let b = g.constant(m(&[&[10.0], &[20.0], &[30.0]]));
        let o = g.outer_add(a, b).unwrap();
        assert_eq!(g.value(o).data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
    }

    #[test]
    fn mask_rows_routes_fill_gradient() {
        let mut g = Graph::new();
        let x = g.param(m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let e = g.param(m(&[&[9.0, 8.0]]));
        let y = g.mask_rows(x, e, &[false, true, true]).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 9.0, 8.0, 9.0, 8.0]);
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(e).unwrap(), &[2.0, 2.0]);
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
