//! Eager reverse-mode autodiff tape.
//!
//! Every op computes its value immediately and records how to route the
//! output gradient back to its inputs. A `Graph` borrows its `ParamStore`
//! immutably, so one frozen store can back many concurrent graphs.

use std::collections::HashMap;

use super::conv::{self, Conv3dGeometry, ConvTranspose2dGeometry};
use super::params::{ParamId, ParamStore};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    CrossEntropyRows { logits: Var, targets: Vec<usize> },
    Mse(Var, Var),
    BceWithLogits { logits: Var, targets: Vec<f32>, pos_weight: f32 },
    L2NormalizeRows { src: Var, norms: Vec<f32> },
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: Conv3dGeometry },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvTranspose2dGeometry },
    SpatialMeanPool(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Transpose(..) => "transpose",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SoftmaxRows(..) => "softmax",
            Op::CrossEntropyRows { .. } => "cross_entropy",
            Op::Mse(..) => "mse",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::L2NormalizeRows { .. } => "l2_normalize",
            Op::Conv3d { .. } => "conv3d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::SpatialMeanPool(..) => "spatial_mean_pool",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

const NORM_EPS: f32 = 1e-12;

pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    first_non_finite: Option<&'static str>,
    relu_signature: u64,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            first_non_finite: None,
            relu_signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// A graph with no parameter store; only inputs and constants.
    pub fn detached() -> Graph<'static> {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            first_non_finite: None,
            relu_signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len(), "{}", op.name());
        if self.first_non_finite.is_none() && data.iter().any(|v| !v.is_finite()) {
            self.first_non_finite = Some(op.name());
        }
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("graph nodes hold valid tensors")
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].data[0]
    }

    /// Name of the first op that produced a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    /// Hash of the sign pattern of every ReLU input seen so far. Two
    /// evaluations with equal signatures took the same linear pieces.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param, t.requires_grad());
        self.param_vars.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Var {
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let needs = self.ng(a) || self.ng(b);
        self.push(self.shape(a).to_vec(), data, op, needs)
    }

    fn map(&mut self, op: Op, a: Var, f: impl Fn(f32) -> f32) -> Var {
        let data = self.value(a).iter().map(|&x| f(x)).collect();
        let needs = self.ng(a);
        self.push(self.shape(a).to_vec(), data, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.map(Op::Scale(a, c), a, |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        self.map(Op::AddScalar(a), a, |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(Op::Tanh(a), a, f32::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut sig = self.relu_signature;
        for &x in self.value(a) {
            sig = (sig ^ u64::from(x > 0.0)).wrapping_mul(0x0100_0000_01b3);
        }
        self.relu_signature = sig;
        self.map(Op::Relu(a), a, |x| x.max(0.0))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..][..n];
            for p in 0..k {
                let s = av[i * k + p];
                let brow = &bv[p * n..][..n];
                for (o, &bb) in orow.iter_mut().zip(brow) {
                    *o += s * bb;
                }
            }
        }
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), needs))
    }

    /// `x · wᵀ + b` with `x: [m, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims2("linear", x)?;
        let (n, k2) = self.dims2("linear", w)?;
        if k != k2 {
            return Err(Error::shape("linear", format!("input [{m}, {k}] vs weight [{n}, {k2}]")));
        }
        if let Some(b) = b {
            if numel(self.shape(b)) != n {
                return Err(Error::shape("linear", format!("bias {:?} for {n} outputs", self.shape(b))));
            }
        }
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = b.map(|b| self.value(b));
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let xrow = &xv[i * k..][..k];
            for j in 0..n {
                let wrow = &wv[j * k..][..k];
                let mut acc = bv.map_or(0.0, |b| b[j]);
                for (a, c) in xrow.iter().zip(wrow) {
                    acc += a * c;
                }
                out[i * n + j] = acc;
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(vec![m, n], out, Op::Linear { x, w, b }, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let av = self.value(a);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let needs = self.ng(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let data = self.value(a).to_vec();
        let needs = self.ng(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), needs))
    }

    fn split_axis(shape: &[usize], axis: usize) -> (usize, usize) {
        (numel(&shape[..axis]), numel(&shape[axis + 1..]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "nothing to concatenate"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, inner) = Self::split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * chunk..][..chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), axis }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 1)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 0)
    }

    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, inner) = Self::split_axis(&shape, axis);
        let sv = self.value(src);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&sv[(o * shape[axis] + start) * inner..][..len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let needs = self.ng(src);
        Ok(self.push(oshape, out, Op::Slice { src, axis, start }, needs))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        self.slice(src, 1, start, len)
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        self.slice(src, 0, start, len)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let needs = self.ng(a);
        self.push(vec![1], vec![s], Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f32>() / v.len() as f32;
        let needs = self.ng(a);
        self.push(vec![1], vec![s], Op::Mean(a), needs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("softmax", a)?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        debug_assert_eq!(out.len(), m * n);
        let needs = self.ng(a);
        Ok(self.push(vec![m, n], out, Op::SoftmaxRows(a), needs))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("cross_entropy", logits)?;
        if targets.len() != m || targets.iter().any(|&t| t >= n) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets (< {n}) required for {m} rows", m),
            ));
        }
        let lv = self.value(logits);
        let mut total = 0.0f32;
        for (row, &t) in lv.chunks(n).zip(targets) {
            total += log_sum_exp(row) - row[t];
        }
        let needs = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![total / m as f32],
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let s: f32 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = s / av.len() as f32;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(vec![1], vec![v], Op::Mse(a, b), needs))
    }

    /// Mean binary cross-entropy on logits, positives weighted by `pos_weight`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f32], pos_weight: f32) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits vs {} targets", lv.len(), targets.len()),
            ));
        }
        let s: f32 = lv
            .iter()
            .zip(targets)
            .map(|(&z, &t)| pos_weight * t * softplus(-z) + (1.0 - t) * softplus(z))
            .sum();
        let v = s / lv.len() as f32;
        let needs = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![v],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                pos_weight,
            },
            needs,
        ))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("l2_normalize", a)?;
        let mut out = self.value(a).to_vec();
        let mut norms = Vec::with_capacity(m);
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let needs = self.ng(a);
        Ok(self.push(vec![m, n], out, Op::L2NormalizeRows { src: a, norms }, needs))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: Conv3dGeometry) -> Result<Var> {
        let os = conv::conv3d_out_shape(self.shape(x), self.shape(w), &geom)?;
        if let Some(b) = b {
            if numel(self.shape(b)) != os[1] {
                return Err(Error::shape("conv3d", format!("bias {:?} for {} channels", self.shape(b), os[1])));
            }
        }
        let xs: [usize; 5] = self.shape(x).try_into().expect("checked rank");
        let ws: [usize; 5] = self.shape(w).try_into().expect("checked rank");
        let out = conv::conv3d_forward(self.value(x), xs, self.value(w), ws, b.map(|b| self.value(b)), &geom, os);
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(os.to_vec(), out, Op::Conv3d { x, w, b, geom }, needs))
    }

    /// 1-D convolution over `[N, C, L]` with kernel `[O, C, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::shape("conv1d", format!("expected rank-3, got {xs:?} and {ws:?}")));
        }
        let x5 = self.reshape(x, &[xs[0], xs[1], xs[2], 1, 1])?;
        let w5 = self.reshape(w, &[ws[0], ws[1], ws[2], 1, 1])?;
        let geom = Conv3dGeometry::new([stride, 1, 1], [padding, 0, 0]);
        let y = self.conv3d(x5, w5, b, geom)?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &ys[..3])
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvTranspose2dGeometry,
    ) -> Result<Var> {
        let os = conv::conv_transpose2d_out_shape(self.shape(x), self.shape(w), &geom)?;
        if let Some(b) = b {
            if numel(self.shape(b)) != os[1] {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("bias {:?} for {} channels", self.shape(b), os[1]),
                ));
            }
        }
        let xs: [usize; 4] = self.shape(x).try_into().expect("checked rank");
        let ws: [usize; 4] = self.shape(w).try_into().expect("checked rank");
        let out = conv::conv_transpose2d_forward(
            self.value(x),
            xs,
            self.value(w),
            ws,
            b.map(|b| self.value(b)),
            &geom,
            os,
        );
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(os.to_vec(), out, Op::ConvTranspose2d { x, w, b, geom }, needs))
    }

    /// Global average pooling of `[N, C, D, H, W]` over `H, W`, giving `[N·D, C]`
    /// with one row per (sample, depth) pair.
    pub fn spatial_mean_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w]: [usize; 5] = self
            .shape(x)
            .try_into()
            .map_err(|_| Error::shape("spatial_mean_pool", format!("expected rank 5, got {:?}", self.shape(x))))?;
        let xv = self.value(x);
        let area = h * w;
        let mut out = vec![0.0f32; n * d * c];
        for ni in 0..n {
            for ci in 0..c {
                for di in 0..d {
                    let plane = &xv[((ni * c + ci) * d + di) * area..][..area];
                    out[(ni * d + di) * c + ci] = plane.iter().sum::<f32>() / area as f32;
                }
            }
        }
        let needs = self.ng(x);
        Ok(self.push(vec![n * d, c], out, Op::SpatialMeanPool(x), needs))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", ln.shape)));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: node.op.name() });
            }
            self.route(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn route(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.nodes[v.0].data.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        let val = |v: Var| self.nodes[v.0].data.as_slice();
        let y = node.data.as_slice();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    // dA = G · Bᵀ
                    for i in 0..m {
                        let grow = &g[i * n..][..n];
                        for p in 0..k {
                            let brow = &bv[p * n..][..n];
                            d[i * k + p] += dot(grow, brow);
                        }
                    }
                });
                acc(*b, &mut |d| {
                    // dB = Aᵀ · G
                    for i in 0..m {
                        let grow = &g[i * n..][..n];
                        for p in 0..k {
                            let s = av[i * k + p];
                            for (dd, gg) in d[p * n..][..n].iter_mut().zip(grow) {
                                *dd += s * gg;
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let n = self.nodes[w.0].shape[0];
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |d| {
                    for i in 0..m {
                        let drow = &mut d[i * k..][..k];
                        for j in 0..n {
                            let gj = g[i * n + j];
                            if gj != 0.0 {
                                for (dd, ww) in drow.iter_mut().zip(&wv[j * k..][..k]) {
                                    *dd += gj * ww;
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for i in 0..m {
                        let xrow = &xv[i * k..][..k];
                        for j in 0..n {
                            let gj = g[i * n + j];
                            if gj != 0.0 {
                                for (dd, xx) in d[j * k..][..k].iter_mut().zip(xrow) {
                                    *dd += gj * xx;
                                }
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for row in g.chunks(n) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                acc(*a, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => {
                let xv = val(*a);
                acc(*a, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, inner) = Self::split_axis(&node.shape, *axis);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.nodes[p.0].shape[*axis] * inner;
                    acc(p, &mut |d| {
                        for o in 0..outer {
                            add_into(&mut d[o * chunk..][..chunk], &g[o * total + offset..][..chunk]);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { src, axis, start } => {
                let sshape = &self.nodes[src.0].shape;
                let (outer, inner) = Self::split_axis(sshape, *axis);
                let len = node.shape[*axis] * inner;
                let full = sshape[*axis] * inner;
                acc(*src, &mut |d| {
                    for o in 0..outer {
                        add_into(&mut d[o * full + start * inner..][..len], &g[o * len..][..len]);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].data.len() as f32;
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SoftmaxRows(a) => {
                let n = node.shape[1];
                acc(*a, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let s = dot(grow, yrow);
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - s);
                        }
                    }
                });
            }
            Op::CrossEntropyRows { logits, targets } => {
                let n = self.nodes[logits.0].shape[1];
                let m = targets.len() as f32;
                let lv = val(*logits);
                acc(*logits, &mut |d| {
                    for ((drow, lrow), &t) in d.chunks_mut(n).zip(lv.chunks(n)).zip(targets) {
                        let mut p = lrow.to_vec();
                        softmax_in_place(&mut p);
                        p[t] -= 1.0;
                        for (d, p) in drow.iter_mut().zip(&p) {
                            *d += g[0] * p / m;
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let c = 2.0 * g[0] / av.len() as f32;
                acc(*a, &mut |d| {
                    for ((d, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *d += c * (x - y);
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *d -= c * (x - y);
                    }
                });
            }
            Op::BceWithLogits {
                logits,
                targets,
                pos_weight,
            } => {
                let lv = val(*logits);
                let c = g[0] / lv.len() as f32;
                acc(*logits, &mut |d| {
                    for ((d, &z), &t) in d.iter_mut().zip(lv).zip(targets) {
                        let s = sigmoid(z);
                        *d += c * (pos_weight * t * (s - 1.0) + (1.0 - t) * s);
                    }
                });
            }
            Op::L2NormalizeRows { src, norms } => {
                let n = node.shape[1];
                acc(*src, &mut |d| {
                    for (((drow, grow), yrow), norm) in
                        d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).zip(norms)
                    {
                        let s = dot(grow, yrow);
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += (g - y * s) / norm;
                        }
                    }
                });
            }
            Op::Conv3d { x, w, b, geom } => {
                let xs: [usize; 5] = self.nodes[x.0].shape.as_slice().try_into().unwrap();
                let ws: [usize; 5] = self.nodes[w.0].shape.as_slice().try_into().unwrap();
                let os: [usize; 5] = node.shape.as_slice().try_into().unwrap();
                let (dx, dw, db) =
                    conv::conv3d_backward(val(*x), xs, val(*w), ws, geom, os, g, self.nodes[x.0].needs_grad);
                if let Some(dx) = dx {
                    acc(*x, &mut |d| add_into(d, &dx));
                }
                acc(*w, &mut |d| add_into(d, &dw));
                if let Some(b) = b {
                    acc(*b, &mut |d| add_into(d, &db));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let xs: [usize; 4] = self.nodes[x.0].shape.as_slice().try_into().unwrap();
                let ws: [usize; 4] = self.nodes[w.0].shape.as_slice().try_into().unwrap();
                let os: [usize; 4] = node.shape.as_slice().try_into().unwrap();
                let (dx, dw, db) = conv::conv_transpose2d_backward(
                    val(*x),
                    xs,
                    val(*w),
                    ws,
                    geom,
                    os,
                    g,
                    self.nodes[x.0].needs_grad,
                );
                if let Some(dx) = dx {
                    acc(*x, &mut |d| add_into(d, &dx));
                }
                acc(*w, &mut |d| add_into(d, &dw));
                if let Some(b) = b {
                    acc(*b, &mut |d| add_into(d, &db));
                }
            }
            Op::SpatialMeanPool(x) => {
                let [n, c, dd, h, w]: [usize; 5] = self.nodes[x.0].shape.as_slice().try_into().unwrap();
                let area = h * w;
                acc(*x, &mut |d| {
                    for ni in 0..n {
                        for ci in 0..c {
                            for di in 0..dd {
                                let gv = g[(ni * dd + di) * c + ci] / area as f32;
                                d[((ni * c + ci) * dd + di) * area..][..area]
                                    .iter_mut()
                                    .for_each(|v| *v += gv);
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Gradients from one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded value; `None` when
    /// the value does not require grad or is not on the loss path.
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f32]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Adds `scale ×` every parameter gradient into the store's grad buffers.
    /// Parameters that do not require grad are left untouched.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f32) -> Result<()> {
        for &(id, v) in &self.params {
            if !store.is_trainable(id) {
                continue;
            }
            match self.wrt(v) {
                Some(g) => store.get_mut(id).accumulate_grad(g, scale)?,
                None => {
                    // off the loss path: gradient is exactly zero
                    let n = store.get(id).len();
                    store.get_mut(id).accumulate_grad(&vec![0.0; n], 0.0)?;
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn add_into(d: &mut [f32], g: &[f32]) {
    for (d, g) in d.iter_mut().zip(g) {
        *d += g;
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn log_sum_exp(row: &[f32]) -> f32 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax_in_place(row: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn softmax(x: &[f32]) -> Vec<f32> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}
