//! Record-as-executed reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every operation appends one node holding its output
//! values and whatever it needs for the backward pass. Inputs always precede
//! outputs, so [`Graph::backward`] is a single reverse sweep. Convolutions use
//! the cross-correlation convention (no kernel flip) in both directions.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise single-input operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    Tanh,
    Abs,
    Square,
    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    Ln {
        floor: f64,
    },
}

/// Elementwise two-input operations. Operands must have equal shapes, or one
/// of them must be a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Reduce(ReduceOp, Var),
    RowSum(Var),
    RowNorm(Var),
    MatMul(Var, Var),
    BiasAdd(Var, Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        filters: usize,
        cols: Option<Vec<f64>>,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        filters: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(UnaryOp::LeakyRelu(_), _) => "leaky_relu",
            Op::Unary(UnaryOp::Relu, _) => "relu",
            Op::Unary(UnaryOp::Sigmoid, _) => "sigmoid",
            Op::Unary(UnaryOp::Tanh, _) => "tanh",
            Op::Unary(UnaryOp::Abs, _) => "abs",
            Op::Unary(UnaryOp::Square, _) => "square",
            Op::Unary(UnaryOp::Ln { .. }, _) => "ln",
            Op::Binary(BinaryOp::Add, ..) => "add",
            Op::Binary(BinaryOp::Sub, ..) => "sub",
            Op::Binary(BinaryOp::Mul, ..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Reduce(ReduceOp::Sum, _) => "sum",
            Op::Reduce(ReduceOp::Mean, _) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::RowNorm(_) => "row_norm",
            Op::MatMul(..) => "matmul",
            Op::BiasAdd(..) => "bias_add",
            Op::Reshape(_) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one across backward passes.
    grad: Option<Vec<f64>>,
}

/// A single-writer tape of tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Registers `t` as a leaf. It is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.values().to_vec(), t.requires_grad())
    }

    /// Registers a differentiable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.values().to_vec(), true)
    }

    /// Registers a leaf that is never differentiated.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.values().to_vec(), false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push_leaf(Vec::new(), vec![value], false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            values,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(numel(&shape), values.len());
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} (node {})", op.name(), self.nodes.len())));
        }
        self.nodes.push(Node {
            shape,
            values,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's values out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), n.values.clone())
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        match self.nodes[v.0].values.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::Usage(format!(
                "item() on node of shape {:?}",
                self.nodes[v.0].shape
            ))),
        }
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    // ---- elementwise ----------------------------------------------------

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0];
        let values: Vec<f64> = match op {
            UnaryOp::LeakyRelu(alpha) => x.values.iter().map(|&v| if v > 0.0 { v } else { alpha * v }).collect(),
            UnaryOp::Relu => x.values.iter().map(|&v| v.max(0.0)).collect(),
            UnaryOp::Sigmoid => x.values.iter().map(|&v| sigmoid(v)).collect(),
            UnaryOp::Tanh => x.values.iter().map(|&v| v.tanh()).collect(),
            UnaryOp::Abs => x.values.iter().map(|&v| v.abs()).collect(),
            UnaryOp::Square => x.values.iter().map(|&v| v * v).collect(),
            UnaryOp::Ln { floor } => {
                if floor.is_nan() || floor <= 0.0 {
                    return Err(Error::Domain(format!("ln floor must be positive, got {floor}")));
                }
                x.values.iter().map(|&v| v.max(floor).ln()).collect()
            }
        };
        let shape = x.shape.clone();
        let rg = x.requires_grad;
        self.push(shape, values, Op::Unary(op, a), rg)
    }

    /// Dispatches one of the elementwise kinds by arity.
    pub fn elementwise(&mut self, kind: Elementwise, inputs: &[Var]) -> Result<Var> {
        match (kind, inputs) {
            (Elementwise::Unary(op), [a]) => self.unary(op, *a),
            (Elementwise::Binary(op), [a, b]) => self.binary(op, *a, *b),
            _ => Err(Error::Usage(format!("{kind:?} called with {} inputs", inputs.len()))),
        }
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let shape = if na.shape == nb.shape || nb.shape.is_empty() {
            na.shape.clone()
        } else if na.shape.is_empty() {
            nb.shape.clone()
        } else {
            return Err(Error::dim(op_name(op), &na.shape, &nb.shape));
        };
        let len = numel(&shape);
        let at = |i: usize| na.values[if na.values.len() == 1 { 0 } else { i }];
        let bt = |i: usize| nb.values[if nb.values.len() == 1 { 0 } else { i }];
        let values: Vec<f64> = match op {
            BinaryOp::Add => (0..len).map(|i| at(i) + bt(i)).collect(),
            BinaryOp::Sub => (0..len).map(|i| at(i) - bt(i)).collect(),
            BinaryOp::Mul => (0..len).map(|i| at(i) * bt(i)).collect(),
        };
        let rg = na.requires_grad || nb.requires_grad;
        self.push(shape, values, Op::Binary(op, a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let x = &self.nodes[a.0];
        let values = x.values.iter().map(|v| v * factor).collect();
        let (shape, rg) = (x.shape.clone(), x.requires_grad);
        self.push(shape, values, Op::Scale(a, factor), rg)
    }

    /// Adds a constant.
    pub fn offset(&mut self, a: Var, delta: f64) -> Result<Var> {
        let x = &self.nodes[a.0];
        let values = x.values.iter().map(|v| v + delta).collect();
        let (shape, rg) = (x.shape.clone(), x.requires_grad);
        self.push(shape, values, Op::Offset(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.unary(UnaryOp::LeakyRelu(alpha), a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, a)
    }

    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary(UnaryOp::Ln { floor }, a)
    }

    // ---- reductions -----------------------------------------------------

    pub fn reduce(&mut self, op: ReduceOp, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0];
        if x.values.is_empty() {
            return Err(Error::Domain("reduction over an empty tensor".into()));
        }
        let s: f64 = x.values.iter().sum();
        let v = match op {
            ReduceOp::Sum => s,
            ReduceOp::Mean => s / x.values.len() as f64,
        };
        let rg = x.requires_grad;
        self.push(Vec::new(), vec![v], Op::Reduce(op, a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a)
    }

    /// Sums every axis but the leading one: `[N, ...] -> [N]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0];
        let n = *x
            .shape
            .first()
            .ok_or_else(|| Error::Usage("row_sum on a scalar".into()))?;
        let stride = x.values.len() / n;
        let values = x.values.chunks(stride).map(|r| r.iter().sum()).collect();
        let rg = x.requires_grad;
        self.push(vec![n], values, Op::RowSum(a), rg)
    }

    /// Euclidean norm of each row of an `[N, d]` tensor: `-> [N]`.
    ///
    /// The subgradient at a zero row is taken to be zero.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0];
        if x.shape.len() != 2 {
            return Err(Error::dim("row_norm", &x.shape, &[0, 0]));
        }
        let values = x
            .values
            .chunks(x.shape[1])
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let (n, rg) = (x.shape[0], x.requires_grad);
        self.push(vec![n], values, Op::RowNorm(a), rg)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(Error::dim("matmul", &na.shape, &nb.shape));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, &na.values, false, &nb.values, false, 0.0, &mut out);
        let rg = na.requires_grad || nb.requires_grad;
        self.push(vec![m, n], out, Op::MatMul(a, b), rg)
    }

    /// Adds `bias[j]` to every element in channel `j` (axis 1) of a tensor
    /// shaped `[N, C, ...]`.
    pub fn bias_add(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[bias.0]);
        if na.shape.len() < 2 || nb.shape != [na.shape[1]] {
            return Err(Error::dim("bias_add", &na.shape, &nb.shape));
        }
        let channels = na.shape[1];
        let inner: usize = na.shape[2..].iter().product();
        let mut values = na.values.clone();
        for (i, chunk) in values.chunks_mut(inner).enumerate() {
            let b = nb.values[i % channels];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let shape = na.shape.clone();
        let rg = na.requires_grad || nb.requires_grad;
        self.push(shape, values, Op::BiasAdd(a, bias), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = &self.nodes[a.0];
        if numel(shape) != x.values.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &x.shape, shape));
        }
        let values = x.values.clone();
        let rg = x.requires_grad;
        self.push(shape.to_vec(), values, Op::Reshape(a), rg)
    }

    // ---- convolution ----------------------------------------------------

    /// 2-d cross-correlation of `input` `[N, C, H, W]` with `kernel`
    /// `[F, C, kH, kW]`, plus an optional per-filter `bias` `[F]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (ni, nk) = (&self.nodes[input.0], &self.nodes[kernel.0]);
        if ni.shape.len() != 4 || nk.shape.len() != 4 || ni.shape[1] != nk.shape[1] || stride == 0 {
            return Err(Error::dim("conv2d", &ni.shape, &nk.shape));
        }
        let (batch, channels, h, w) = (ni.shape[0], ni.shape[1], ni.shape[2], ni.shape[3]);
        let (filters, kh, kw) = (nk.shape[0], nk.shape[2], nk.shape[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::dim("conv2d", &ni.shape, &nk.shape));
        }
        let bias_rg = self.check_bias("conv2d", bias, filters)?;
        let (ni, nk) = (&self.nodes[input.0], &self.nodes[kernel.0]);
        let geom = ConvGeom {
            batch,
            in_channels: channels,
            in_h: h,
            in_w: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let cols = kernels::im2col(&ni.values, &geom);
        let np = batch * geom.out_positions();
        let mut out_cm = vec![0.0; filters * np];
        kernels::gemm(
            filters,
            geom.patch_len(),
            np,
            &nk.values,
            false,
            &cols,
            false,
            0.0,
            &mut out_cm,
        );
        if let Some(b) = bias {
            let bv = &self.nodes[b.0].values;
            for (f, row) in out_cm.chunks_mut(np).enumerate() {
                row.iter_mut().for_each(|v| *v += bv[f]);
            }
        }
        let values = kernels::to_sample_major(&out_cm, batch, filters, geom.out_positions());
        let rg = ni.requires_grad || nk.requires_grad || bias_rg;
        let keep_cols = nk.requires_grad;
        self.push(
            vec![batch, filters, geom.out_h, geom.out_w],
            values,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                filters,
                cols: keep_cols.then_some(cols),
            },
            rg,
        )
    }

    /// Transposed convolution: the adjoint of [`Graph::conv2d`] with the same
    /// `kernel` `[F, C, kH, kW]`, stride, and padding. Maps `[N, F, h, w]` to
    /// `[N, C, (h-1)·stride - 2·padding + kH, ...]`, plus an optional bias `[C]`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ni, nk) = (&self.nodes[input.0], &self.nodes[kernel.0]);
        if ni.shape.len() != 4 || nk.shape.len() != 4 || ni.shape[1] != nk.shape[0] || stride == 0 {
            return Err(Error::dim("conv_transpose2d", &ni.shape, &nk.shape));
        }
        let (batch, filters, h, w) = (ni.shape[0], ni.shape[1], ni.shape[2], ni.shape[3]);
        let (channels, kh, kw) = (nk.shape[1], nk.shape[2], nk.shape[3]);
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(Error::dim("conv_transpose2d", &ni.shape, &nk.shape));
        }
        let bias_rg = self.check_bias("conv_transpose2d", bias, channels)?;
        let (ni, nk) = (&self.nodes[input.0], &self.nodes[kernel.0]);
        let geom = ConvGeom {
            batch,
            in_channels: channels,
            in_h: full_h - 2 * padding,
            in_w: full_w - 2 * padding,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: h,
            out_w: w,
        };
        let np = batch * geom.out_positions();
        let y_cm = kernels::to_channel_major(&ni.values, batch, filters, geom.out_positions());
        let mut cols = vec![0.0; geom.cols_len()];
        kernels::gemm(
            geom.patch_len(),
            filters,
            np,
            &nk.values,
            true,
            &y_cm,
            false,
            0.0,
            &mut cols,
        );
        let mut values = vec![0.0; batch * channels * geom.in_h * geom.in_w];
        kernels::col2im(&cols, &geom, &mut values);
        if let Some(b) = bias {
            let bv = &self.nodes[b.0].values;
            let plane = geom.in_h * geom.in_w;
            for (i, chunk) in values.chunks_mut(plane).enumerate() {
                let c = bv[i % channels];
                chunk.iter_mut().for_each(|v| *v += c);
            }
        }
        let rg = ni.requires_grad || nk.requires_grad || bias_rg;
        self.push(
            vec![batch, channels, geom.in_h, geom.in_w],
            values,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
                filters,
            },
            rg,
        )
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, expected: usize) -> Result<bool> {
        match bias {
            None => Ok(false),
            Some(b) => {
                let nb = &self.nodes[b.0];
                if nb.shape != [expected] {
                    return Err(Error::dim(op, &nb.shape, &[expected]));
                }
                Ok(nb.requires_grad)
            }
        }
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates d`loss`/d`leaf` into every reachable differentiable leaf.
    ///
    /// Gradients are added to whatever the leaves already hold, so calling
    /// this twice without [`Graph::zero_grad`] doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].shape.is_empty() && self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                let g = node.grad.get_or_insert_with(|| vec![0.0; dy.len()]);
                for (a, b) in g.iter_mut().zip(&dy) {
                    *a += b;
                }
                continue;
            }
            for (input, contribution) in self.node_backward(i, &dy) {
                if contribution.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of {} (node {i})",
                        self.nodes[i].op.name()
                    )));
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Input-gradient contributions of node `i` given its output adjoint.
    fn node_backward(&self, i: usize, dy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, a) => {
                let x = &self.nodes[a.0].values;
                let y = &node.values;
                let g: Vec<f64> = match *op {
                    UnaryOp::LeakyRelu(alpha) => x
                        .iter()
                        .zip(dy)
                        .map(|(&x, &d)| if x > 0.0 { d } else { alpha * d })
                        .collect(),
                    UnaryOp::Relu => x.iter().zip(dy).map(|(&x, &d)| if x > 0.0 { d } else { 0.0 }).collect(),
                    UnaryOp::Sigmoid => y.iter().zip(dy).map(|(&y, &d)| d * y * (1.0 - y)).collect(),
                    UnaryOp::Tanh => y.iter().zip(dy).map(|(&y, &d)| d * (1.0 - y * y)).collect(),
                    UnaryOp::Abs => x.iter().zip(dy).map(|(&x, &d)| d * sign(x)).collect(),
                    UnaryOp::Square => x.iter().zip(dy).map(|(&x, &d)| 2.0 * x * d).collect(),
                    UnaryOp::Ln { floor } => x
                        .iter()
                        .zip(dy)
                        .map(|(&x, &d)| if x > floor { d / x } else { 0.0 })
                        .collect(),
                };
                out.push((*a, g));
            }
            Op::Binary(op, a, b) => {
                let (xa, xb) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
                let fold = |g: Vec<f64>, len: usize| -> Vec<f64> {
                    if len == 1 && g.len() != 1 {
                        vec![g.iter().sum()]
                    } else {
                        g
                    }
                };
                let at = |k: usize| xa[if xa.len() == 1 { 0 } else { k }];
                let bt = |k: usize| xb[if xb.len() == 1 { 0 } else { k }];
                if rg(*a) {
                    let g: Vec<f64> = match op {
                        BinaryOp::Add | BinaryOp::Sub => dy.to_vec(),
                        BinaryOp::Mul => dy.iter().enumerate().map(|(k, d)| d * bt(k)).collect(),
                    };
                    out.push((*a, fold(g, xa.len())));
                }
                if rg(*b) {
                    let g: Vec<f64> = match op {
                        BinaryOp::Add => dy.to_vec(),
                        BinaryOp::Sub => dy.iter().map(|d| -d).collect(),
                        BinaryOp::Mul => dy.iter().enumerate().map(|(k, d)| d * at(k)).collect(),
                    };
                    out.push((*b, fold(g, xb.len())));
                }
            }
            Op::Scale(a, factor) => out.push((*a, dy.iter().map(|d| d * factor).collect())),
            Op::Offset(a) => out.push((*a, dy.to_vec())),
            Op::Reduce(op, a) => {
                let n = self.nodes[a.0].values.len();
                let d = match op {
                    ReduceOp::Sum => dy[0],
                    ReduceOp::Mean => dy[0] / n as f64,
                };
                out.push((*a, vec![d; n]));
            }
            Op::RowSum(a) => {
                let x = &self.nodes[a.0];
                let stride = x.values.len() / x.shape[0];
                let g = dy.iter().flat_map(|&d| std::iter::repeat(d).take(stride)).collect();
                out.push((*a, g));
            }
            Op::RowNorm(a) => {
                let x = &self.nodes[a.0];
                let d = x.shape[1];
                let mut g = vec![0.0; x.values.len()];
                for (r, (row, grow)) in x.values.chunks(d).zip(g.chunks_mut(d)).enumerate() {
                    let norm = node.values[r];
                    if norm > 0.0 {
                        for (gv, xv) in grow.iter_mut().zip(row) {
                            *gv = dy[r] * xv / norm;
                        }
                    }
                }
                out.push((*a, g));
            }
            Op::MatMul(a, b) => {
                let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
                if rg(*a) {
                    let mut g = vec![0.0; m * k];
                    kernels::gemm(m, n, k, dy, false, &nb.values, true, 0.0, &mut g);
                    out.push((*a, g));
                }
                if rg(*b) {
                    let mut g = vec![0.0; k * n];
                    kernels::gemm(k, m, n, &na.values, true, dy, false, 0.0, &mut g);
                    out.push((*b, g));
                }
            }
            Op::BiasAdd(a, b) => {
                if rg(*a) {
                    out.push((*a, dy.to_vec()));
                }
                if rg(*b) {
                    let channels = self.nodes[b.0].values.len();
                    let inner: usize = node.shape[2..].iter().product();
                    let mut g = vec![0.0; channels];
                    for (i, chunk) in dy.chunks(inner).enumerate() {
                        g[i % channels] += chunk.iter().sum::<f64>();
                    }
                    out.push((*b, g));
                }
            }
            Op::Reshape(a) => out.push((*a, dy.to_vec())),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                filters,
                cols,
            } => {
                let np = geom.batch * geom.out_positions();
                let d_cm = kernels::to_channel_major(dy, geom.batch, *filters, geom.out_positions());
                if rg(*kernel) {
                    let cols = cols
                        .as_ref()
                        .expect("conv2d keeps its columns when the kernel is trainable");
                    let mut g = vec![0.0; filters * geom.patch_len()];
                    kernels::gemm(*filters, np, geom.patch_len(), &d_cm, false, cols, true, 0.0, &mut g);
                    out.push((*kernel, g));
                }
                if let Some(b) = bias.filter(|b| rg(*b)) {
                    out.push((b, d_cm.chunks(np).map(|r| r.iter().sum()).collect()));
                }
                if rg(*input) {
                    let kv = &self.nodes[kernel.0].values;
                    let mut dcols = vec![0.0; geom.cols_len()];
                    kernels::gemm(geom.patch_len(), *filters, np, kv, true, &d_cm, false, 0.0, &mut dcols);
                    let mut g = vec![0.0; self.nodes[input.0].values.len()];
                    kernels::col2im(&dcols, geom, &mut g);
                    out.push((*input, g));
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
                filters,
            } => {
                let np = geom.batch * geom.out_positions();
                let dcols = kernels::im2col(dy, geom);
                if rg(*input) {
                    let kv = &self.nodes[kernel.0].values;
                    let mut g_cm = vec![0.0; filters * np];
                    kernels::gemm(*filters, geom.patch_len(), np, kv, false, &dcols, false, 0.0, &mut g_cm);
                    out.push((
                        *input,
                        kernels::to_sample_major(&g_cm, geom.batch, *filters, geom.out_positions()),
                    ));
                }
                if rg(*kernel) {
                    let y_cm = kernels::to_channel_major(
                        &self.nodes[input.0].values,
                        geom.batch,
                        *filters,
                        geom.out_positions(),
                    );
                    let mut g = vec![0.0; filters * geom.patch_len()];
                    kernels::gemm(*filters, np, geom.patch_len(), &y_cm, false, &dcols, true, 0.0, &mut g);
                    out.push((*kernel, g));
                }
                if let Some(b) = bias.filter(|b| rg(*b)) {
                    let channels = geom.in_channels;
                    let plane = geom.in_h * geom.in_w;
                    let mut g = vec![0.0; channels];
                    for (i, chunk) in dy.chunks(plane).enumerate() {
                        g[i % channels] += chunk.iter().sum::<f64>();
                    }
                    out.push((b, g));
                }
            }
        }
        out
    }
}

/// Either arity of elementwise operation, for [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Unary(UnaryOp),
    Binary(BinaryOp),
}

fn op_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i2 = g.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
        let m = g.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.values(p), &[1., 2., 3., 4.]);

        let a = g.constant(&t(&[2, 2], &[1., 0., 0., 0.]));
        let b = g.constant(&t(&[2, 2], &[5., 6., 7., 8.]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.values(p), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(vec![2, 3]));
        let b = g.constant(&Tensor::zeros(vec![2, 3]));
        match g.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn conv2d_ones() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let k = g.constant(&Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.values(y), &[9.0]);
    }

    #[test]
    fn conv2d_zero_kernel_gives_zero() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[1, 2, 4, 4], &(0..32).map(|i| i as f64).collect::<Vec<_>>()));
        let k = g.constant(&Tensor::zeros(vec![3, 2, 3, 3]));
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 4, 4]);
        assert!(g.values(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(vec![1, 1, 2, 2]));
        let k = g.constant(&Tensor::zeros(vec![1, 1, 5, 5]));
        assert!(matches!(g.conv2d(x, k, None, 1, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_transpose_round_trips_shape() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(vec![2, 3, 16, 16]));
        let k = g.constant(&Tensor::zeros(vec![5, 3, 4, 4]));
        let y = g.conv2d(x, k, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 8, 8]);
        let z = g.conv_transpose2d(y, k, None, 2, 1).unwrap();
        assert_eq!(g.shape(z), &[2, 3, 16, 16]);
        assert!(g.values(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_transpose_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(vec![1, 2, 4, 4]));
        let k = g.constant(&Tensor::zeros(vec![3, 1, 4, 4]));
        assert!(matches!(
            g.conv_transpose2d(x, k, None, 2, 1),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn elementwise_hand_values() {
        let mut g = Graph::new();
        let z = g.constant(&Tensor::scalar(0.0));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.item(s).unwrap(), 0.5);
        let m = g.constant(&Tensor::scalar(-1.0));
        let l = g.leaky_relu(m, 0.2).unwrap();
        assert!((g.item(l).unwrap() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn binary_rejects_mismatched_shapes_but_allows_scalars() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(vec![2, 2]));
        let b = g.constant(&Tensor::zeros(vec![4]));
        assert!(g.add(a, b).is_err());
        let s = g.scalar(3.0);
        let c = g.add(a, s).unwrap();
        assert_eq!(g.values(c), &[3.0; 4]);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.param(&t(&[3], &[1., 2., 3.]));
        let m = g.mean(x).unwrap();
        assert_eq!(g.item(m).unwrap(), 2.0);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0 / 3.0; 3]);

        let z = g.constant(&Tensor::zeros(vec![4]));
        let s = g.sum(z).unwrap();
        assert_eq!(g.item(s).unwrap(), 0.0);
    }

    #[test]
    fn backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2, 2], &[1., -2., 3., 0.5]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 4]);
        g.zero_grad();
        assert_eq!(g.grad(x).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(vec![3]));
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1., 2.]));
        let c = g.constant(&t(&[2], &[3., 4.]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3., 4.]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn row_norm_is_euclidean_and_safe_at_zero() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2, 2], &[3., 4., 0., 0.]));
        let n = g.row_norm(x).unwrap();
        assert_eq!(g.values(n), &[5.0, 0.0]);
        let s = g.sum(n).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::scalar(1e300));
        assert!(matches!(g.square(x), Err(Error::NonFinite(_))));
    }
}
