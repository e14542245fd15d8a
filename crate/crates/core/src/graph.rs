//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends
//! a node holding its output value; [`Graph::backward`] walks the nodes in
//! reverse and accumulates vector-Jacobian products. Gradients of a node
//! used several times are summed.

use std::collections::HashMap;

use crate::conv::{self, gemm, ConvGeometry};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Silu(Var),
    Conv2d { input: Var, weight: Var, geo: ConvGeometry },
    AddChannel { x: Var, bias: Var },
    MulChannel { gate: Var, x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    Upsample { x: Var, factor: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    SpaceToDepth { x: Var, block: usize },
    DepthToSpace { x: Var, block: usize },
    Sum(Var),
    Mse(Var, Var),
    L2Norm(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `var`, zeros when unreachable.
    pub fn get_or_zeros(&self, var: Var) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; numel(&self.shapes[var.0])])
    }

    /// Gradients of every parameter registered via [`Graph::param`], in
    /// registration order. Registered but unreachable parameters get zeros.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .map(|(id, v)| (id.clone(), self.get_or_zeros(*v)))
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axpy(acc: &mut [f64], scale: f64, x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, &b)| *a += scale * b);
}

/// Index mapping for space-to-depth: output flat index for each input flat index.
fn space_to_depth_map(shape: &[usize], block: usize) -> Vec<usize> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow, oc) = (h / block, w / block, c * block * block);
    let mut map = vec![0; n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let src = ((b * c + ch) * h + y) * w + x;
                    let och = ch * block * block + (y % block) * block + (x % block);
                    map[src] = ((b * oc + och) * oh + y / block) * ow + x / block;
                }
            }
        }
    }
    map
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::from_parts(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
    }

    /// First element of `v` (intended for scalar nodes).
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that follows the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Differentiable leaf regardless of the tensor's flag.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated lookups of the same id
    /// return the same node so that gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, id: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(id) {
            return Ok(v);
        }
        let p = store.get(id)?;
        let v = self.push(
            p.tensor.shape().to_vec(),
            p.tensor.data().to_vec(),
            Op::Leaf,
            true,
        );
        self.params.push((id.to_string(), v));
        self.param_index.insert(id.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).iter().map(|&x| c * x).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, c), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Sigmoid(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Silu(a), rg)
    }

    /// Cross-correlation of an NCHW input with an OIKK weight (square kernels).
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (is, ws) = (self.shape(input), self.shape(weight));
        if is.len() != 4 || ws.len() != 4 || is[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", is, ws));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be at least 1".into()));
        }
        if is[2] + 2 * padding < ws[2] || is[3] + 2 * padding < ws[3] {
            return Err(Error::shape("conv2d", is, ws));
        }
        let geo = ConvGeometry {
            batch: is[0],
            in_channels: is[1],
            height: is[2],
            width: is[3],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            padding,
        };
        let data = conv::forward(&geo, self.value(input), self.value(weight));
        let shape = vec![geo.batch, geo.out_channels, geo.out_height(), geo.out_width()];
        let rg = self.rg(&[input, weight]);
        Ok(self.push(shape, data, Op::Conv2d { input, weight, geo }, rg))
    }

    /// Broadcast-add a per-channel vector (`[C]`) or per-sample, per-channel
    /// matrix (`[N, C]`) to an `[N, C, ...]` tensor.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let ok = xs.len() >= 2
            && ((bs.len() == 1 && bs[0] == xs[1]) || (bs.len() == 2 && bs[0] == xs[0] && bs[1] == xs[1]));
        if !ok {
            return Err(Error::shape("add_channel", &xs, &bs));
        }
        let (n, c, s) = (xs[0], xs[1], numel(&xs[2..]));
        let per_sample = bs.len() == 2;
        let mut data = self.value(x).to_vec();
        let b = self.value(bias);
        for i in 0..n {
            for ch in 0..c {
                let bv = if per_sample { b[i * c + ch] } else { b[ch] };
                data[(i * c + ch) * s..(i * c + ch + 1) * s].iter_mut().for_each(|v| *v += bv);
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(xs, data, Op::AddChannel { x, bias }, rg))
    }

    /// Multiply every channel of `x` (`[N, C, ...]`) by a single-channel gate (`[N, 1, ...]`).
    pub fn mul_channel(&mut self, gate: Var, x: Var) -> Result<Var> {
        let (gs, xs) = (self.shape(gate).to_vec(), self.shape(x).to_vec());
        if gs.len() != xs.len() || gs.len() < 2 || gs[0] != xs[0] || gs[1] != 1 || gs[2..] != xs[2..] {
            return Err(Error::shape("mul_channel", &gs, &xs));
        }
        let (n, c, s) = (xs[0], xs[1], numel(&xs[2..]));
        let (gv, xv) = (self.value(gate), self.value(x));
        let mut data = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                for k in 0..s {
                    let idx = (i * c + ch) * s + k;
                    data[idx] = gv[i * s + k] * xv[idx];
                }
            }
        }
        let rg = self.rg(&[gate, x]);
        Ok(self.push(xs, data, Op::MulChannel { gate, x }, rg))
    }

    /// `x[M, K] · wᵀ + b` with `w: [O, K]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("linear bias", self.shape(b), &ws));
            }
        }
        let (m, k, o) = (xs[0], xs[1], ws[0]);
        let mut data = vec![0.0; m * o];
        if let Some(b) = b {
            let bv = self.value(b);
            data.chunks_mut(o).for_each(|row| row.copy_from_slice(bv));
        }
        gemm(m, k, o, self.value(x), (k as isize, 1), self.value(w), (1, k as isize), 1.0, &mut data);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(vec![m, o], data, Op::Linear { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(Error::shape("matmul", &as_, &bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k as isize, 1), self.value(b), (n as isize, 1), 0.0, &mut data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], data, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Input(format!("transpose needs a matrix, got {s:?}")));
        }
        let data = transpose(self.value(a), s[0], s[1]);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![s[1], s[0]], data, Op::Transpose(a), rg))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Input(format!("softmax_rows needs a matrix, got {s:?}")));
        }
        let mut data = self.value(a).to_vec();
        for row in data.chunks_mut(s[1]) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - m).exp());
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(s, data, Op::SoftmaxRows(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let data = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), rg))
    }

    /// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::Input(format!("upsample_nearest needs NCHW and factor ≥ 1, got {s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x);
        let mut data = vec![0.0; nc * oh * ow];
        for p in 0..nc {
            for y in 0..oh {
                for xx in 0..ow {
                    data[(p * oh + y) * ow + xx] = src[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![s[0], s[1], oh, ow], data, Op::Upsample { x, factor }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<Tensor> = parts.iter().map(|&p| self.tensor(p)).collect();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let out = Tensor::concat(&refs, axis)?;
        let rg = self.rg(parts);
        let shape = out.shape().to_vec();
        Ok(self.push(shape, out.into_data(), Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.tensor(x).narrow(axis, start, len)?;
        let rg = self.rg(&[x]);
        let shape = out.shape().to_vec();
        Ok(self.push(shape, out.into_data(), Op::Narrow { x, axis, start }, rg))
    }

    /// `[N, C, H, W] → [N, C·b², H/b, W/b]`; output channel `c·b² + dy·b + dx`.
    pub fn space_to_depth(&mut self, x: Var, block: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || block == 0 || !s[2].is_multiple_of(block) || !s[3].is_multiple_of(block) {
            return Err(Error::Input(format!("space_to_depth by {block} invalid for {s:?}")));
        }
        let map = space_to_depth_map(&s, block);
        let mut data = vec![0.0; map.len()];
        for (i, &v) in self.value(x).iter().enumerate() {
            data[map[i]] = v;
        }
        let shape = vec![s[0], s[1] * block * block, s[2] / block, s[3] / block];
        let rg = self.rg(&[x]);
        Ok(self.push(shape, data, Op::SpaceToDepth { x, block }, rg))
    }

    /// Inverse of [`Graph::space_to_depth`].
    pub fn depth_to_space(&mut self, x: Var, block: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || block == 0 || !s[1].is_multiple_of(block * block) {
            return Err(Error::Input(format!("depth_to_space by {block} invalid for {s:?}")));
        }
        let shape = vec![s[0], s[1] / (block * block), s[2] * block, s[3] * block];
        let map = space_to_depth_map(&shape, block);
        let src = self.value(x);
        let data = map.iter().map(|&m| src[m]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, data, Op::DepthToSpace { x, block }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![v], Op::Sum(a), rg)
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len() as f64;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![1], vec![v], Op::Mse(a, b), rg))
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![v], Op::L2Norm(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x * x).sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![v], Op::SumSquares(a), rg)
    }

    /// Gradients of the scalar `loss` w.r.t. every differentiable node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if numel(self.shape(loss)) != 1 {
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
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| axpy(acc, 1.0, g));
                self.accumulate(grads, *b, |acc| axpy(acc, 1.0, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |acc| axpy(acc, 1.0, g));
                self.accumulate(grads, *b, |acc| axpy(acc, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |acc| {
                    acc.iter_mut().zip(g).zip(bv).for_each(|((r, &gi), &y)| *r += gi * y)
                });
                self.accumulate(grads, *b, |acc| {
                    acc.iter_mut().zip(g).zip(av).for_each(|((r, &gi), &x)| *r += gi * x)
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |acc| axpy(acc, *c, g)),
            Op::Sigmoid(a) => {
                let y = &node.data;
                self.accumulate(grads, *a, |acc| {
                    acc.iter_mut()
                        .zip(g)
                        .zip(y)
                        .for_each(|((r, &gi), &yi)| *r += gi * yi * (1.0 - yi))
                });
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, |acc| {
                    acc.iter_mut().zip(g).zip(x).for_each(|((r, &gi), &xi)| {
                        let s = sigmoid(xi);
                        *r += gi * s * (1.0 + xi * (1.0 - s));
                    })
                });
            }
            Op::Conv2d { input, weight, geo } => {
                let (di, dw) = conv::backward(
                    geo,
                    self.value(*input),
                    self.value(*weight),
                    g,
                    self.requires_grad(*input),
                    self.requires_grad(*weight),
                );
                if let Some(di) = di {
                    self.accumulate(grads, *input, |acc| axpy(acc, 1.0, &di));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *weight, |acc| axpy(acc, 1.0, &dw));
                }
            }
            Op::AddChannel { x, bias } => {
                self.accumulate(grads, *x, |acc| axpy(acc, 1.0, g));
                let (n, c) = (node.shape[0], node.shape[1]);
                let s = numel(&node.shape[2..]);
                let per_sample = self.shape(*bias).len() == 2;
                self.accumulate(grads, *bias, |acc| {
                    for b in 0..n {
                        for ch in 0..c {
                            let total: f64 = g[(b * c + ch) * s..(b * c + ch + 1) * s].iter().sum();
                            acc[if per_sample { b * c + ch } else { ch }] += total;
                        }
                    }
                });
            }
            Op::MulChannel { gate, x } => {
                let (n, c) = (node.shape[0], node.shape[1]);
                let s = numel(&node.shape[2..]);
                let (gv, xv) = (self.value(*gate), self.value(*x));
                self.accumulate(grads, *x, |acc| {
                    for b in 0..n {
                        for ch in 0..c {
                            for k in 0..s {
                                let idx = (b * c + ch) * s + k;
                                acc[idx] += g[idx] * gv[b * s + k];
                            }
                        }
                    }
                });
                self.accumulate(grads, *gate, |acc| {
                    for b in 0..n {
                        for ch in 0..c {
                            for k in 0..s {
                                let idx = (b * c + ch) * s + k;
                                acc[b * s + k] += g[idx] * xv[idx];
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                // dx[M×K] = g[M×O] · w[O×K]
                self.accumulate(grads, *x, |acc| {
                    gemm(m, o, k, g, (o as isize, 1), self.value(*w), (k as isize, 1), 1.0, acc)
                });
                // dw[O×K] = gᵀ[O×M] · x[M×K]
                self.accumulate(grads, *w, |acc| {
                    gemm(o, m, k, g, (1, o as isize), self.value(*x), (k as isize, 1), 1.0, acc)
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |acc| {
                        for row in g.chunks(o) {
                            axpy(acc, 1.0, row);
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                // da[M×K] = g[M×N] · bᵀ[N×K]
                self.accumulate(grads, *a, |acc| {
                    gemm(m, n, k, g, (n as isize, 1), self.value(*b), (1, n as isize), 1.0, acc)
                });
                // db[K×N] = aᵀ[K×M] · g[M×N]
                self.accumulate(grads, *b, |acc| {
                    gemm(k, m, n, self.value(*a), (1, k as isize), g, (n as isize, 1), 1.0, acc)
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let gt = transpose(g, r, c);
                self.accumulate(grads, *a, |acc| axpy(acc, 1.0, &gt));
            }
            Op::SoftmaxRows(a) => {
                let cols = node.shape[1];
                let y = &node.data;
                self.accumulate(grads, *a, |acc| {
                    for ((ar, gr), yr) in acc.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            ar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |acc| axpy(acc, 1.0, g)),
            Op::Upsample { x, factor } => {
                let s = self.shape(*x);
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                self.accumulate(grads, *x, |acc| {
                    for p in 0..nc {
                        for y in 0..oh {
                            for xx in 0..ow {
                                acc[(p * h + y / factor) * w + xx / factor] += g[(p * oh + y) * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let outer = numel(&node.shape[..*axis]);
                let inner = numel(&node.shape[axis + 1..]);
                let total = node.shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    self.accumulate(grads, *p, |acc| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            axpy(&mut acc[o * len * inner..(o + 1) * len * inner], 1.0, &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let outer = numel(&xs[..*axis]);
                let inner = numel(&xs[axis + 1..]);
                let dim = xs[*axis];
                let len = node.shape[*axis];
                self.accumulate(grads, *x, |acc| {
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        axpy(&mut acc[dst..dst + len * inner], 1.0, &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::SpaceToDepth { x, block } => {
                let map = space_to_depth_map(self.shape(*x), *block);
                self.accumulate(grads, *x, |acc| {
                    for (i, &m) in map.iter().enumerate() {
                        acc[i] += g[m];
                    }
                });
            }
            Op::DepthToSpace { x, block } => {
                let map = space_to_depth_map(&node.shape, *block);
                self.accumulate(grads, *x, |acc| {
                    for (i, &m) in map.iter().enumerate() {
                        acc[m] += g[i];
                    }
                });
            }
            Op::Sum(a) => self.accumulate(grads, *a, |acc| acc.iter_mut().for_each(|r| *r += g[0])),
            Op::Mse(a, b) => {
                let n = self.value(*a).len() as f64;
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = 2.0 * g[0] / n;
                self.accumulate(grads, *a, |acc| {
                    acc.iter_mut().zip(av).zip(bv).for_each(|((r, x), y)| *r += c * (x - y))
                });
                self.accumulate(grads, *b, |acc| {
                    acc.iter_mut().zip(av).zip(bv).for_each(|((r, x), y)| *r -= c * (x - y))
                });
            }
            Op::L2Norm(a) => {
                let norm = node.data[0];
                if norm > 0.0 {
                    let av = self.value(*a);
                    self.accumulate(grads, *a, |acc| axpy(acc, g[0] / norm, av));
                }
            }
            Op::SumSquares(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, |acc| axpy(acc, 2.0 * g[0], av));
            }
        }
    }
}

fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.variable(&Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.1));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sum_of_squares_via_mul_gives_2x() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::randn(&[3, 5], &mut rng);
        let mut g = Graph::new();
        let x = g.variable(&t);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        for (gv, xv) in grads.get(x).unwrap().iter().zip(t.data()) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn reuse_accumulates_path_gradients() {
        // loss = sum(3x) + sum(x*x) → grad = 3 + 2x
        let t = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        let mut g = Graph::new();
        let x = g.variable(&t);
        let a = g.scale(x, 3.0);
        let b = g.mul(x, x).unwrap();
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        for (gv, xv) in grads.get(x).unwrap().iter().zip(t.data()) {
            assert!((gv - (3.0 + 2.0 * xv)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut g = Graph::new();
        let x = g.variable(&Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.variable(&Tensor::ones(&[2]));
        let c = g.constant(&Tensor::ones(&[2]));
        let y = g.mul(x, c).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn conv2d_all_ones_is_nine() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::ones(&[1, 1, 3, 3]));
        let w = g.constant(&Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y), &[9.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::randn(&[2, 1, 4, 5], &mut rng);
        let mut g = Graph::new();
        let x = g.constant(&t);
        let w = g.constant(&Tensor::ones(&[1, 1, 1, 1]));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y), t.data());
    }

    #[test]
    fn conv2d_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::ones(&[1, 2, 4, 4]));
        let w = g.constant(&Tensor::ones(&[1, 3, 3, 3]));
        let err = g.conv2d(x, w, 1, 0).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn space_to_depth_round_trips() {
        let t = Tensor::from_fn(&[1, 3, 8, 16], |i| i as f64);
        let mut g = Graph::new();
        let x = g.constant(&t);
        let d = g.space_to_depth(x, 8).unwrap();
        assert_eq!(g.shape(d), &[1, 192, 1, 2]);
        // channel c·64 + dy·8 + dx at block (0, 1) holds pixel (dy, 8 + dx) of channel c
        let dv = g.value(d);
        assert_eq!(dv[(64 + 2 * 8 + 3) * 2 + 1], t.data()[(8 + 2) * 16 + 8 + 3]);
        let back = g.depth_to_space(d, 8).unwrap();
        assert_eq!(g.value(back), t.data());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.constant(&Tensor::randn(&[3, 7], &mut rng));
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }
}
