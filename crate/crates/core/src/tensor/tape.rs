use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{matmul as dense_matmul, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
            Activation::Identity => v,
        }
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

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool(Var),
    Act(Var, Activation),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
    SumLastAxis(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    L2Normalize(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Linear record of executed operations. Node order is topological by
/// construction, so the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Per-node gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Splits a shape around `axis` into (outer, axis_len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

fn row_lse(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records a parameter leaf. Repeated calls for the same id return the
    /// same node, so gradients from every use meet in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = dense_matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a))
    }

    /// Adds a 1-D `bias` broadcast along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if axis >= tx.rank() || tb.len() != tx.shape()[axis] {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let (_, n, inner) = split_axis(tx.shape(), axis);
        let b = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| v + b[(k / inner) % n])
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::AddBias { x, bias, axis }))
    }

    /// Cross-correlation of a `C_in x H x W` map with `C_out x C_in x k x k`
    /// kernels. Output size is `floor((H + 2 pad - k) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(kernel), stride, pad)?;
        Ok(self.push(out, Op::Conv2d { x, kernel, stride, pad }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(Error::dim("global_avg_pool", tx.shape(), &[0, 0, 0]));
        }
        let c = tx.shape()[0];
        let area = tx.shape()[1] * tx.shape()[2];
        let data = tx
            .data()
            .chunks(area)
            .map(|ch| ch.iter().sum::<f64>() / area as f64)
            .collect();
        let out = Tensor::from_parts(vec![c], data);
        Ok(self.push(out, Op::GlobalAvgPool(x)))
    }

    /// Elementwise activation. `Identity` records nothing and returns `x`.
    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Identity {
            return x;
        }
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(out, Op::Act(x, kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.value(p).shape().to_vec(),
            None => return Err(Error::Contract("concat of zero parts".into())),
        };
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// `out.flat[k] = x.flat[indices[k]]`, shaped as `shape`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::dim("gather", shape, &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= tx.len()) {
            return Err(Error::dim("gather", tx.shape(), &[bad]));
        }
        let data = indices.iter().map(|&i| tx.data()[i]).collect();
        let out = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.push(out, Op::Gather { x, indices }))
    }

    /// Selects rows of a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", &s, &[2]));
        }
        let c = s[1];
        let idx = rows.iter().flat_map(|&r| (0..c).map(move |j| r * c + j)).collect();
        self.gather(x, idx, &[rows.len(), c])
    }

    /// Selects columns of a 2-D tensor.
    pub fn gather_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("gather_cols", &s, &[2]));
        }
        let c = s[1];
        let idx = (0..s[0])
            .flat_map(|i| cols.iter().map(move |&j| i * c + j))
            .collect();
        self.gather(x, idx, &[s[0], cols.len()])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the trailing axis, dropping it.
    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.is_empty() {
            return Err(Error::dim("sum_last_axis", s, &[1]));
        }
        let k = s[s.len() - 1];
        let mut shape = s[..s.len() - 1].to_vec();
        let data = tx.data().chunks(k).map(|c| c.iter().sum()).collect();
        if shape.is_empty() {
            shape = Vec::new();
        }
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::SumLastAxis(x)))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::dim("log_softmax_rows", tx.shape(), &[2]));
        }
        let k = tx.shape()[1];
        let mut data = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(k) {
            let lse = row_lse(row);
            data.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::LogSoftmaxRows(x)))
    }

    /// Row-wise log-sum-exp of an `N x K` matrix, giving a length-N vector.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::dim("logsumexp_rows", tx.shape(), &[2]));
        }
        let k = tx.shape()[1];
        let data = tx.data().chunks(k).map(row_lse).collect();
        let out = Tensor::from_parts(vec![tx.shape()[0]], data);
        Ok(self.push(out, Op::LogSumExpRows(x)))
    }

    /// Smallest `|input|` seen by any relu on the tape, or `inf` without
    /// relus. Finite differences straddle a kink when this is below the step.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Act(x, Activation::Relu) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// `x / sqrt(|x|^2 + eps)` over the whole tensor; `eps` keeps the zero
    /// vector differentiable.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = (tx.data().iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
        let out = tx.map(|v| v / n);
        self.push(out, Op::L2Normalize(x))
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    /// Accumulates d(loss)/d(param) into `store` for every reachable parameter.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                let dst = store.get_mut(id);
                for (d, s) in dst.grad.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                accumulate(grads, *a, dense_matmul(g, &tb.transpose()?)?);
                accumulate(grads, *b, dense_matmul(&ta.transpose()?, g)?);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()?),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                accumulate(grads, *a, zip(g, tb, |x, y| x * y));
                accumulate(grads, *b, zip(g, ta, |x, y| x * y));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::AddBias { x, bias, axis } => {
                accumulate(grads, *x, g.clone());
                let (_, n, inner) = split_axis(g.shape(), *axis);
                let mut gb = vec![0.0; n];
                for (k, &v) in g.data().iter().enumerate() {
                    gb[(k / inner) % n] += v;
                }
                let shape = self.value(*bias).shape().to_vec();
                accumulate(grads, *bias, Tensor::from_parts(shape, gb));
            }
            Op::Conv2d { x, kernel, stride, pad } => {
                let (gx, gk) =
                    conv2d_backward(self.value(*x), self.value(*kernel), g, *stride, *pad);
                accumulate(grads, *x, gx);
                accumulate(grads, *kernel, gk);
            }
            Op::GlobalAvgPool(x) => {
                let tx = self.value(*x);
                let area = tx.shape()[1] * tx.shape()[2];
                let scale = 1.0 / area as f64;
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gc| std::iter::repeat_n(gc * scale, area))
                    .collect();
                accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), data));
            }
            Op::Act(x, kind) => {
                let out = &node.value;
                let gx = match kind {
                    Activation::Relu => zip(g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
                    Activation::Sigmoid => zip(g, out, |gv, s| gv * s * (1.0 - s)),
                    Activation::Identity => g.clone(),
                };
                accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let width = shape[*axis];
                    let mut data = Vec::with_capacity(outer * width * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[start..start + width * inner]);
                    }
                    accumulate(grads, p, Tensor::from_parts(shape, data));
                    offset += width;
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Gather { x, indices } => {
                let tx = self.value(*x);
                let mut gx = vec![0.0; tx.len()];
                for (&i, &gv) in indices.iter().zip(g.data()) {
                    gx[i] += gv;
                }
                accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::SumLastAxis(x) => {
                let tx = self.value(*x);
                let k = *tx.shape().last().unwrap();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv, k))
                    .collect();
                accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), data));
            }
            Op::LogSoftmaxRows(x) => {
                // d/dx_j = g_j - softmax_j * sum_k g_k
                let k = g.shape()[1];
                let mut gx = Vec::with_capacity(g.len());
                for (grow, orow) in g.data().chunks(k).zip(node.value.data().chunks(k)) {
                    let gsum: f64 = grow.iter().sum();
                    gx.extend(grow.iter().zip(orow).map(|(gv, lp)| gv - lp.exp() * gsum));
                }
                accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), gx));
            }
            Op::LogSumExpRows(x) => {
                let tx = self.value(*x);
                let k = tx.shape()[1];
                let mut gx = Vec::with_capacity(tx.len());
                for ((row, &lse), &gv) in tx.data().chunks(k).zip(node.value.data()).zip(g.data()) {
                    gx.extend(row.iter().map(|v| gv * (v - lse).exp()));
                }
                accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
            }
            Op::L2Normalize(x) => {
                // (g - y (y.g)) / n
                let tx = self.value(*x);
                let n = (tx.data().iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                let y = &node.value;
                let yg: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                let gx = zip(g, y, |gv, yv| (gv - yv * yg) / n);
                accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}

const NORM_EPS: f64 = 1e-12;

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if x.rank() != 3 || k.rank() != 4 || k.shape()[1] != x.shape()[0] {
        return Err(Error::dim("conv2d", x.shape(), k.shape()));
    }
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (ho, wo) = match (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::Config(format!(
                "conv2d: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad} gives no output"
            )))
        }
    };
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        let oplane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        for c in 0..ci {
            let xplane = &xd[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = kd[((o * ci + c) * kh + ky) * kw + kx];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *ov += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![co, ho, wo], out))
}

fn conv2d_backward(x: &Tensor, k: &Tensor, g: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor) {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (ho, wo) = (g.shape()[1], g.shape()[2]);
    let xd = x.data();
    let kd = k.data();
    let gd = g.data();
    let mut gx = vec![0.0; xd.len()];
    let mut gk = vec![0.0; kd.len()];
    for o in 0..co {
        let gplane = &gd[o * ho * wo..(o + 1) * ho * wo];
        for c in 0..ci {
            let base = c * h * w;
            for ky in 0..kh {
                for kx in 0..kw {
                    let kidx = ((o * ci + c) * kh + ky) * kw + kx;
                    let wv = kd[kidx];
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = base + iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let gv = gplane[oy * wo + ox];
                            acc += gv * xd[row + ix as usize];
                            gx[row + ix as usize] += gv * wv;
                        }
                    }
                    gk[kidx] += acc;
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(k.shape().to_vec(), gk),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_direct_substitution() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2x3]"), "{err}");
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = tape.constant(t(&[1, 3, 3], &data));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_summation_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).item(), 9.0);
    }

    #[test]
    fn conv_rejects_empty_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 2]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, 1, 0), Err(Error::Config(_))));
        assert!(matches!(tape.conv2d(x, k, 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).data(), &[2.5]);
        let c = tape.constant(Tensor::full(&[3, 4, 4], 7.0));
        let p = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(p).data(), &[7.0, 7.0, 7.0]);
        let bad = tape.constant(Tensor::zeros(&[4, 4]));
        assert!(tape.global_avg_pool(bad).is_err());
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Relu.apply(-3.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.5, 0.25, 1e300]));
        let y = tape.activation(x, Activation::Identity);
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(tape.concat(&[a], 0).unwrap(), a);
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1], &[3.0]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let parts: Vec<Var> = [512, 10, 10, 10]
            .iter()
            .map(|&w| tape.constant(Tensor::zeros(&[w])))
            .collect();
        let f = tape.concat(&parts, 0).unwrap();
        assert_eq!(tape.shape(f), &[542]);
        let bad = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.concat(&[a, bad], 0).is_err());
        assert!(tape.concat(&[], 0).is_err());
    }

    #[test]
    fn concat_axis1_backward_slices() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let m = tape.mul(c, w).unwrap();
        let s = tape.sum(m);
        let g = tape.gradients(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("p", t(&[2], &[1.0, -2.0]));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let l = tape.sum(p);
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[1.0, 1.0]);

        store.zero_grad();
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let sq = tape.mul(p, p).unwrap();
        let l = tape.sum(sq);
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn add_bias_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let b_row = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b_col = tape.constant(t(&[2], &[10.0, 20.0]));
        let y = tape.add_bias(x, b_row, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let y = tape.add_bias(x, b_col, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
        assert!(tape.add_bias(x, b_col, 1).is_err());
    }

    #[test]
    fn log_softmax_of_equal_scores() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[3.0, 3.0]));
        let y = tape.log_softmax_rows(x).unwrap();
        assert!((tape.value(y).data()[0] + 2f64.ln()).abs() < 1e-15);
        let l = tape.logsumexp_rows(x).unwrap();
        assert!((tape.value(l).data()[0] - (3.0 + 2f64.ln())).abs() < 1e-15);
    }
}
