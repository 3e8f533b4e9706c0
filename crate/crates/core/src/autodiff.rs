//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is executed. Nodes are appended
//! in execution order, so the node list is already a topological order and
//! [`Graph::backward`] walks it once in reverse. A node requires a gradient
//! iff it is a trainable leaf or any of its inputs requires one; frozen
//! branches (teacher networks, `θ_old` copies) therefore cost nothing in the
//! backward pass.

use crate::error::{dim_err, Error, Result};
use crate::kernels::{gemm, MatRef};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a valid (unpadded) 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn new(
        input: [usize; 3],
        filters: usize,
        kernel: [usize; 2],
        stride: usize,
    ) -> Result<Self> {
        let [channels, height, width] = input;
        let [kh, kw] = kernel;
        if stride == 0 {
            return dim_err("conv2d stride must be at least 1");
        }
        if kh == 0 || kw == 0 || kh > height || kw > width {
            return dim_err(format!(
                "conv2d kernel {kh}x{kw} does not fit input {channels}x{height}x{width}"
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            filters,
            kh,
            kw,
            stride,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.height - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width - self.kw) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.filters * self.out_h() * self.out_w()
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Unfolds one sample into a `(C·kh·kw) × (H'·W')` column matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let npos = oh * ow;
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    for oy in 0..oh {
                        let src = (c * self.height + oy * self.stride + ki) * self.width + kj;
                        for ox in 0..ow {
                            dst[oy * ow + ox] = x[src + ox * self.stride];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters columns back onto the input grid.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let npos = oh * ow;
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * npos..(row + 1) * npos];
                    for oy in 0..oh {
                        let dst = (c * self.height + oy * self.stride + ki) * self.width + kj;
                        for ox in 0..ow {
                            dx[dst + ox * self.stride] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `a·b`, or `a·bᵀ` when `trans_b`.
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    /// Adds a bias vector to every row.
    AddBias {
        x: Var,
        bias: Var,
    },
    /// Adds one bias per channel to `[rows × channels·plane]`.
    AddChannelBias {
        x: Var,
        bias: Var,
        plane: usize,
    },
    Scale {
        x: Var,
        c: f64,
    },
    /// Multiplies a tensor by one element of another node.
    ScaleByElem {
        x: Var,
        s: Var,
        idx: usize,
    },
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    Sum {
        x: Var,
    },
    SumRows {
        x: Var,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Gradients are available after [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
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

    /// Gradient of the last backward pass; `None` for nodes that do not
    /// require gradients or were not reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Copy of `v` cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value",
                op_name(&op)
            )));
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn as_matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => dim_err(format!("{what}: expected a matrix, got shape {s:?}")),
        }
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`, used for row-batched dense layers.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.as_matrix(a, "matmul lhs")?;
        let (br, bc) = self.as_matrix(b, "matmul rhs")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return dim_err(format!(
                "matmul: shapes {:?} and {:?}{} have mismatched inner dimensions",
                self.shape(a),
                self.shape(b),
                if trans_b { "ᵀ" } else { "" }
            ));
        }
        let mut out = vec![0.0; m * n];
        {
            let am = MatRef::row_major(self.value(a).data(), m, k);
            let bm = MatRef::row_major(self.value(b).data(), br, bc);
            gemm(am, if trans_b { bm.t() } else { bm }, 0.0, &mut out);
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            &[a, b],
        )
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op_name(&op))?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    /// Adds `bias` (length = product of the trailing dims) to every leading row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(bias).len();
        let xv = self.value(x);
        if xv.shape().len() < 2 || xv.len() / xv.shape()[0] != n {
            return dim_err(format!(
                "add_bias: bias of {n} elements does not match rows of {:?}",
                xv.shape()
            ));
        }
        let b = self.value(bias).data();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::AddBias { x, bias }, &[x, bias])
    }

    /// Adds `bias[c]` to every element of channel `c` in rows laid out as
    /// `channels × plane`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var, plane: usize) -> Result<Var> {
        let ch = self.value(bias).len();
        let xv = self.value(x);
        let row = ch * plane;
        if plane == 0 || !xv.len().is_multiple_of(row) {
            return dim_err(format!(
                "add_channel_bias: {ch} channels of {plane} do not tile {:?}",
                xv.shape()
            ));
        }
        let b = self.value(bias).data();
        let mut data = xv.data().to_vec();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let c = b[i % ch];
            chunk.iter_mut().for_each(|v| *v += c);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::AddChannelBias { x, bias, plane }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale { x, c }, &[x])
    }

    /// `x * s[idx]`, differentiable in both `x` and `s`.
    pub fn scale_by_elem(&mut self, x: Var, s: Var, idx: usize) -> Result<Var> {
        let Some(&c) = self.value(s).data().get(idx) else {
            return dim_err(format!(
                "scale_by_elem: index {idx} outside {:?}",
                self.shape(s)
            ));
        };
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::ScaleByElem { x, s, idx }, &[x, s])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(t, Op::Relu { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::tanh);
        self.push(t, Op::Tanh { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp { x }, &[x])
    }

    /// Softmax along the last dimension, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(xv.cols()) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::Softmax { x }, &[x])
    }

    /// `x − max − log Σ exp(x − max)` along the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(xv.cols()) {
            log_softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::LogSoftmax { x }, &[x])
    }

    /// Sum of all elements, as a shape-`[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums along the last dimension: `[.., n] → [rows]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data: Vec<f64> = xv
            .data()
            .chunks(xv.cols())
            .map(|r| r.iter().sum())
            .collect();
        let t = Tensor::vector(data);
        self.push(t, Op::SumRows { x }, &[x])
    }

    /// Picks `x[r, idx[r]]` for every row `r`: `[rows × n] → [rows]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if idx.len() != xv.rows() {
            return dim_err(format!(
                "gather: {} indices for {} rows",
                idx.len(),
                xv.rows()
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return dim_err(format!("gather: index {bad} outside {n} columns"));
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| xv.data()[r * n + i])
            .collect();
        let t = Tensor::vector(data);
        self.push(
            t,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape { x }, &[x])
    }

    /// Valid cross-correlation of `input` (`C×H×W`, or `B×C×H×W`) with
    /// `kernels` (`F×C×kh×kw`). Output is `F×H'×W'` (or `B×F×H'×W'`).
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize) -> Result<Var> {
        let ks = self.shape(kernels).to_vec();
        let xs = self.shape(input).to_vec();
        let (batch, chw) = match xs.as_slice() {
            [c, h, w] => (None, [*c, *h, *w]),
            [b, c, h, w] => (Some(*b), [*c, *h, *w]),
            s => return dim_err(format!("conv2d: input must be C×H×W or B×C×H×W, got {s:?}")),
        };
        let [f, kc, kh, kw] = ks[..] else {
            return dim_err(format!("conv2d: kernels must be F×C×kh×kw, got {ks:?}"));
        };
        if kc != chw[0] {
            return dim_err(format!(
                "conv2d: kernel channels {kc} vs input channels {}",
                chw[0]
            ));
        }
        let geom = ConvGeom::new(chw, f, [kh, kw], stride)?;
        let out = self.conv2d_forward(input, kernels, geom)?;
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let shape = match batch {
            Some(b) => vec![b, f, oh, ow],
            None => vec![f, oh, ow],
        };
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::Conv2d {
                x: input,
                k: kernels,
                geom,
            },
            &[input, kernels],
        )
    }

    /// Convolution over row-flattened samples: `input` is `[B × C·H·W]`,
    /// output `[B × F·H'·W']`.
    pub fn conv2d_flat(&mut self, input: Var, kernels: Var, geom: ConvGeom) -> Result<Var> {
        let (b, d) = self.as_matrix(input, "conv2d_flat input")?;
        if d != geom.in_len() {
            return dim_err(format!(
                "conv2d_flat: row length {d} vs geometry {}",
                geom.in_len()
            ));
        }
        if self.value(kernels).len() != geom.filters * geom.patch_len() {
            return dim_err(format!(
                "conv2d_flat: kernel shape {:?} vs geometry",
                self.shape(kernels)
            ));
        }
        let out = self.conv2d_forward(input, kernels, geom)?;
        let t = Tensor::new(vec![b, geom.out_len()], out)?;
        self.push(
            t,
            Op::Conv2d {
                x: input,
                k: kernels,
                geom,
            },
            &[input, kernels],
        )
    }

    fn conv2d_forward(&self, input: Var, kernels: Var, geom: ConvGeom) -> Result<Vec<f64>> {
        let x = self.value(input).data();
        let k = self.value(kernels).data();
        let batch = x.len() / geom.in_len();
        let (pl, npos) = (geom.patch_len(), geom.out_h() * geom.out_w());
        let mut cols = vec![0.0; pl * npos];
        let mut out = vec![0.0; batch * geom.out_len()];
        let km = MatRef::row_major(k, geom.filters, pl);
        for (xs, os) in x.chunks(geom.in_len()).zip(out.chunks_mut(geom.out_len())) {
            geom.im2col(xs, &mut cols);
            gemm(km, MatRef::row_major(&cols, pl, npos), 0.0, os);
        }
        Ok(out)
    }

    /// Populates gradients of the scalar `loss` w.r.t. every node that
    /// requires one. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient at node {i} ({})",
                        op_name(&self.nodes[i].op)
                    )));
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        // Accumulates into an input's gradient buffer if that input needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let len = self.nodes[v.0].value.len();
                f(grads[v.0].get_or_insert_with(|| vec![0.0; len]));
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let (br, bc) = (self.shape(b)[0], self.shape(b)[1]);
                let n = if trans_b { br } else { bc };
                let gm = MatRef::row_major(g, m, n);
                let am = MatRef::row_major(val(a), m, k);
                let bm = MatRef::row_major(val(b), br, bc);
                // C = A·op(B): dA = dC·op(B)ᵀ
                acc(a, &mut |da| {
                    gemm(gm, if trans_b { bm } else { bm.t() }, 1.0, da)
                });
                // dB = Aᵀ·dC, or dCᵀ·A when B enters transposed
                acc(b, &mut |db| {
                    if trans_b {
                        gemm(gm.t(), am, 1.0, db)
                    } else {
                        gemm(am.t(), gm, 1.0, db)
                    }
                });
            }
            &Op::Add { a, b } => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub { a, b } => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |d| zip3(d, g, vb, |x, y| x * y));
                acc(b, &mut |d| zip3(d, g, va, |x, y| x * y));
            }
            &Op::AddBias { x, bias } => {
                acc(x, &mut |d| add_into(d, g));
                acc(bias, &mut |d| {
                    for row in g.chunks(d.len()) {
                        add_into(d, row);
                    }
                });
            }
            &Op::AddChannelBias { x, bias, plane } => {
                acc(x, &mut |d| add_into(d, g));
                acc(bias, &mut |d| {
                    let ch = d.len();
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        d[i % ch] += chunk.iter().sum::<f64>();
                    }
                });
            }
            &Op::Scale { x, c } => acc(x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(a, b)| *a += c * b)
            }),
            &Op::ScaleByElem { x, s, idx } => {
                let c = val(s)[idx];
                acc(x, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(a, b)| *a += c * b)
                });
                let dot: f64 = g.iter().zip(val(x)).map(|(a, b)| a * b).sum();
                acc(s, &mut |d| d[idx] += dot);
            }
            &Op::Relu { x } => acc(x, &mut |d| {
                zip3(d, g, val(x), |gy, xv| if xv > 0.0 { gy } else { 0.0 })
            }),
            &Op::Tanh { x } => {
                let y = node.value.data();
                acc(x, &mut |d| zip3(d, g, y, |gy, yv| gy * (1.0 - yv * yv)))
            }
            &Op::Exp { x } => {
                let y = node.value.data();
                acc(x, &mut |d| zip3(d, g, y, |gy, yv| gy * yv))
            }
            &Op::Softmax { x } => {
                let n = node.value.cols();
                let y = node.value.data();
                acc(x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            &Op::LogSoftmax { x } => {
                let n = node.value.cols();
                let y = node.value.data();
                acc(x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..n {
                            dr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                })
            }
            &Op::Sum { x } => acc(x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            &Op::SumRows { x } => {
                let n = self.nodes[x.0].value.cols();
                acc(x, &mut |d| {
                    for (dr, gv) in d.chunks_mut(n).zip(g) {
                        dr.iter_mut().for_each(|v| *v += gv);
                    }
                })
            }
            Op::Gather { x, idx } => {
                let n = self.nodes[x.0].value.cols();
                acc(*x, &mut |d| {
                    for (r, (&i, gv)) in idx.iter().zip(g).enumerate() {
                        d[r * n + i] += gv;
                    }
                })
            }
            &Op::Reshape { x } => acc(x, &mut |d| add_into(d, g)),
            &Op::Conv2d { x, k, geom } => self.conv2d_backward(x, k, geom, g, grads),
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        k: Var,
        geom: ConvGeom,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let (pl, npos) = (geom.patch_len(), geom.out_h() * geom.out_w());
        let km = MatRef::row_major(kv, geom.filters, pl);
        let need_x = self.nodes[x.0].requires_grad;
        let need_k = self.nodes[k.0].requires_grad;
        let mut dk = need_k.then(|| vec![0.0; kv.len()]);
        let mut dx = need_x.then(|| vec![0.0; xv.len()]);
        let mut cols = vec![0.0; pl * npos];
        let mut dcols = vec![0.0; pl * npos];
        for (s, (xs, gs)) in xv
            .chunks(geom.in_len())
            .zip(g.chunks(geom.out_len()))
            .enumerate()
        {
            let gm = MatRef::row_major(gs, geom.filters, npos);
            if let Some(dk) = dk.as_mut() {
                geom.im2col(xs, &mut cols);
                gemm(gm, MatRef::row_major(&cols, pl, npos).t(), 1.0, dk);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(km.t(), gm, 0.0, &mut dcols);
                let off = s * geom.in_len();
                geom.col2im(&dcols, &mut dx[off..off + geom.in_len()]);
            }
        }
        for (v, d) in [(x, dx), (k, dk)] {
            if let Some(d) = d {
                match grads[v.0].as_mut() {
                    Some(buf) => add_into(buf, &d),
                    None => grads[v.0] = Some(d),
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn zip3(dst: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
        *d += f(x, y);
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|v| *v = *v - max - lse);
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::AddBias { .. } => "add_bias",
        Op::AddChannelBias { .. } => "add_channel_bias",
        Op::Scale { .. } => "scale",
        Op::ScaleByElem { .. } => "scale_by_elem",
        Op::Relu { .. } => "relu",
        Op::Tanh { .. } => "tanh",
        Op::Exp { .. } => "exp",
        Op::Softmax { .. } => "softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::Sum { .. } => "sum",
        Op::SumRows { .. } => "sum_rows",
        Op::Gather { .. } => "gather",
        Op::Reshape { .. } => "reshape",
        Op::Conv2d { .. } => "conv2d",
    }
}
