//! Reverse-mode tape over the fixed op vocabulary of the network.
//!
//! Values are immutable once written by an op. A tape is single-owner;
//! `backward` walks the recorded nodes in reverse and accumulates adjoints
//! into per-node gradient buffers. Repeated `backward` calls accumulate.

use super::batchnorm::{BatchNormState, BnCache, BnMode};
use super::conv::{self, ConvSpec};
use super::{strides_of, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache,
    },
    Add {
        a: Var,
        b: Var,
    },
    Hadamard {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    // The shift has zero derivative, so only the scale is recorded.
    Affine {
        input: Var,
        scale: f64,
    },
    Concat {
        axis: usize,
        inputs: Vec<Var>,
    },
    Permute {
        input: Var,
        order: Vec<usize>,
    },
    SliceAxis0 {
        input: Var,
        start: usize,
    },
    Sum {
        input: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Register a leaf value. Gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let out = conv::forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let needs = self.needs(input)
            || self.needs(weight)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|x| x.max(0.0)).collect(),
        )
        .expect("same shape");
        let needs = self.needs(input);
        self.push(out, Op::Relu { input }, needs)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|x| sigmoid(*x)).collect(),
        )
        .expect("same shape");
        let needs = self.needs(input);
        self.push(out, Op::Sigmoid { input }, needs)
    }

    /// Batch norm over the (slice, height, width) axes of an (N, C, H, W)
    /// input. Train mode normalizes with batch statistics and updates the
    /// running statistics in `state`; eval mode uses the running statistics.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: BnMode,
    ) -> Result<Var> {
        state.validate()?;
        let x = self.value(input);
        if x.ndim() != 4 {
            return Err(Error::invalid(format!(
                "batch norm expects a 4-axis input, got {:?}",
                x.shape()
            )));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if c != state.channels() {
            return Err(Error::shape(
                "batch norm channels",
                &[c],
                &[state.channels()],
            ));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                "batch norm gamma/beta",
                self.value(gamma).shape(),
                &[c],
            ));
        }
        let m = n * h * w;
        let (mean, var) = match mode {
            BnMode::Train => {
                if m < 2 {
                    return Err(Error::invalid(
                        "batch norm in train mode needs more than one element per channel",
                    ));
                }
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for v in &x.data()[base..base + h * w] {
                            mean[ci] += v;
                        }
                    }
                }
                for mu in mean.iter_mut() {
                    *mu /= m as f64;
                }
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for v in &x.data()[base..base + h * w] {
                            let d = v - mean[ci];
                            var[ci] += d * d;
                        }
                    }
                }
                for s in var.iter_mut() {
                    *s /= m as f64;
                }
                let mom = state.momentum;
                for ci in 0..c {
                    state.running_mean[ci] = (1.0 - mom) * state.running_mean[ci] + mom * mean[ci];
                    state.running_var[ci] = (1.0 - mom) * state.running_var[ci] + mom * var[ci];
                }
                (mean, var)
            }
            BnMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = vec![0.0f64; x.numel()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for i in base..base + h * w {
                    out[i] = g[ci] * (x.data()[i] - mean[ci]) * inv_std[ci] + b[ci];
                }
            }
        }
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(x.shape().to_vec(), out).expect("same shape"),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache: BnCache {
                    mean,
                    inv_std,
                    mode,
                },
            },
            needs,
        ))
    }

    fn binary_shapes(&self, a: Var, b: Var, context: &str) -> Result<Vec<usize>> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::shape(context, sa, sb));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes(a, b, "elementwise add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, needs))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes(a, b, "hadamard product")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Hadamard { a, b }, needs))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes(a, b, "elementwise divide")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Div { a, b }, needs))
    }

    /// Elementwise scale * x + shift.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(input);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|x| scale * x + shift).collect(),
        )
        .expect("same shape");
        let needs = self.needs(input);
        self.push(out, Op::Affine { input, scale }, needs)
    }

    /// Concatenate along `axis`; all other axes must agree, order preserved.
    pub fn concat(&mut self, axis: usize, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!(
                "concat axis {} out of range for shape {:?}",
                axis, first
            )));
        }
        let mut axis_total = 0usize;
        for v in inputs {
            let s = self.value(*v).shape();
            if s.len() != first.len() {
                return Err(Error::shape("concat rank", s, &first));
            }
            for (i, (l, r)) in s.iter().zip(&first).enumerate() {
                if i != axis && l != r {
                    return Err(Error::shape("concat non-axis dims", s, &first));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let out_block = axis_total * inner;
        let mut out = vec![0.0f64; outer * out_block];
        let mut offset = 0usize;
        for v in inputs {
            let t = self.value(*v);
            let len = t.shape()[axis];
            let in_block = len * inner;
            for o in 0..outer {
                let dst = o * out_block + offset * inner;
                out[dst..dst + in_block]
                    .copy_from_slice(&t.data()[o * in_block..(o + 1) * in_block]);
            }
            offset += len;
        }
        let needs = inputs.iter().any(|v| self.needs(*v));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                axis,
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    /// Axis permutation: output axis j carries input axis order[j].
    pub fn permute(&mut self, input: Var, order: &[usize]) -> Result<Var> {
        let t = self.value(input);
        validate_permutation(order, t.ndim())?;
        let out_shape: Vec<usize> = order.iter().map(|&i| t.shape()[i]).collect();
        let out = permute_data(t.data(), t.shape(), order, &out_shape);
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                input,
                order: order.to_vec(),
            },
            needs,
        ))
    }

    /// Contiguous range [start, start+len) along the leading axis.
    pub fn slice_axis0(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(input);
        if t.ndim() == 0 {
            return Err(Error::invalid("slice_axis0 on a rank-0 tensor"));
        }
        if start + len > t.shape()[0] || len == 0 {
            return Err(Error::invalid(format!(
                "slice_axis0 range {}..{} out of bounds for leading axis {}",
                start,
                start + len,
                t.shape()[0]
            )));
        }
        let inner: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::SliceAxis0 { input, start },
            needs,
        ))
    }

    /// Full reduction to a scalar of shape [1].
    pub fn sum(&mut self, input: Var) -> Var {
        let total: f64 = self.value(input).data().iter().sum();
        let needs = self.needs(input);
        self.push(Tensor::scalar(total), Op::Sum { input }, needs)
    }

    /// Backpropagate from a scalar root. Gradients accumulate into every
    /// node reachable from a requires-grad leaf; repeated calls add up.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let send = |tape: &Tape, v: Var, contrib: Vec<f64>, adj: &mut [Option<Vec<f64>>]| {
            if !tape.needs(v) {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&contrib) {
                        *a += b;
                    }
                }
                None => adj[v.0] = Some(contrib),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let (din, dw, db) = conv::backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    spec,
                    bias.is_some(),
                );
                send(self, *input, din, adj);
                send(self, *weight, dw, adj);
                if let (Some(b), Some(db)) = (bias, db) {
                    send(self, *b, db, adj);
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let contrib = g
                    .iter()
                    .zip(x)
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                send(self, *input, contrib, adj);
            }
            Op::Sigmoid { input } => {
                let y = self.nodes[i].value.data();
                let contrib = g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                send(self, *input, contrib, adj);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let x = self.value(*input);
                let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let m = (n * h * w) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for j in base..base + h * w {
                            let xh = (x.data()[j] - cache.mean[ci]) * cache.inv_std[ci];
                            dgamma[ci] += g[j] * xh;
                            dbeta[ci] += g[j];
                            sum_g[ci] += g[j];
                            sum_gx[ci] += g[j] * xh;
                        }
                    }
                }
                let mut dx = vec![0.0f64; x.numel()];
                match cache.mode {
                    BnMode::Train => {
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * h * w;
                                let k = gam[ci] * cache.inv_std[ci] / m;
                                for j in base..base + h * w {
                                    let xh = (x.data()[j] - cache.mean[ci]) * cache.inv_std[ci];
                                    dx[j] = k * (m * g[j] - sum_g[ci] - xh * sum_gx[ci]);
                                }
                            }
                        }
                    }
                    BnMode::Eval => {
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * h * w;
                                let k = gam[ci] * cache.inv_std[ci];
                                for j in base..base + h * w {
                                    dx[j] = k * g[j];
                                }
                            }
                        }
                    }
                }
                send(self, *input, dx, adj);
                send(self, *gamma, dgamma, adj);
                send(self, *beta, dbeta, adj);
            }
            Op::Add { a, b } => {
                send(self, *a, g.to_vec(), adj);
                send(self, *b, g.to_vec(), adj);
            }
            Op::Hadamard { a, b } => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let ga: Vec<f64> = g.iter().zip(vb).map(|(gi, y)| gi * y).collect();
                let gb: Vec<f64> = g.iter().zip(va).map(|(gi, x)| gi * x).collect();
                send(self, *a, ga, adj);
                send(self, *b, gb, adj);
            }
            Op::Div { a, b } => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let ga: Vec<f64> = g.iter().zip(vb).map(|(gi, y)| gi / y).collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(va.iter().zip(vb))
                    .map(|(gi, (x, y))| -gi * x / (y * y))
                    .collect();
                send(self, *a, ga, adj);
                send(self, *b, gb, adj);
            }
            Op::Affine { input, scale, .. } => {
                let contrib = g.iter().map(|gi| gi * scale).collect();
                send(self, *input, contrib, adj);
            }
            Op::Concat { axis, inputs } => {
                let out_shape = self.nodes[i].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_block = out_shape[*axis] * inner;
                let mut offset = 0usize;
                for v in inputs {
                    let t = self.value(*v);
                    let len = t.shape()[*axis];
                    let in_block = len * inner;
                    let mut contrib = vec![0.0f64; t.numel()];
                    for o in 0..outer {
                        let src = o * out_block + offset * inner;
                        contrib[o * in_block..(o + 1) * in_block]
                            .copy_from_slice(&g[src..src + in_block]);
                    }
                    offset += len;
                    send(self, *v, contrib, adj);
                }
            }
            Op::Permute { input, order } => {
                let t = self.value(*input);
                let out_shape = self.nodes[i].value.shape();
                let in_strides = strides_of(t.shape());
                let mut contrib = vec![0.0f64; t.numel()];
                let mut idx = vec![0usize; out_shape.len()];
                for go in g {
                    let mut in_off = 0usize;
                    for (j, &ax) in order.iter().enumerate() {
                        in_off += idx[j] * in_strides[ax];
                    }
                    contrib[in_off] = *go;
                    increment(&mut idx, out_shape);
                }
                send(self, *input, contrib, adj);
            }
            Op::SliceAxis0 { input, start } => {
                let t = self.value(*input);
                let inner: usize = t.shape()[1..].iter().product();
                let mut contrib = vec![0.0f64; t.numel()];
                contrib[start * inner..start * inner + g.len()].copy_from_slice(g);
                send(self, *input, contrib, adj);
            }
            Op::Sum { input } => {
                let contrib = vec![g[0]; self.value(*input).numel()];
                send(self, *input, contrib, adj);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn validate_permutation(order: &[usize], ndim: usize) -> Result<()> {
    if order.len() != ndim {
        return Err(Error::invalid(format!(
            "permutation {:?} does not match rank {}",
            order, ndim
        )));
    }
    let mut seen = vec![false; ndim];
    for &a in order {
        if a >= ndim || seen[a] {
            return Err(Error::invalid(format!("invalid permutation {:?}", order)));
        }
        seen[a] = true;
    }
    Ok(())
}

fn permute_data(data: &[f64], in_shape: &[usize], order: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let in_strides = strides_of(in_shape);
    let mut out = vec![0.0f64; data.len()];
    let mut idx = vec![0usize; out_shape.len()];
    for o in out.iter_mut() {
        let mut in_off = 0usize;
        for (j, &ax) in order.iter().enumerate() {
            in_off += idx[j] * in_strides[ax];
        }
        *o = data[in_off];
        increment(&mut idx, out_shape);
    }
    out
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for j in (0..idx.len()).rev() {
        idx[j] += 1;
        if idx[j] < shape[j] {
            return;
        }
        idx[j] = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[-2.0, -0.0, 0.5, 3.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 0.5, 3.0]);
        let s = tape.sigmoid(x);
        let want: Vec<f64> = [-2.0f64, 0.0, 0.5, 3.0]
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        for (a, b) in tape.value(s).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1e4), 1.0);
        assert_eq!(sigmoid(-1e4), 0.0);
        assert!(sigmoid(-745.0) > 0.0);
    }

    #[test]
    fn permute_then_inverse_is_bitwise_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..120).map(|i| (i as f64).sin()).collect();
        let x = tape.constant(t(&[2, 3, 4, 5], &data));
        let order = [1usize, 3, 0, 2];
        let mut inverse = [0usize; 4];
        for (j, &a) in order.iter().enumerate() {
            inverse[a] = j;
        }
        let y = tape.permute(x, &order).unwrap();
        let z = tape.permute(y, &inverse).unwrap();
        assert_eq!(tape.value(z).shape(), tape.value(x).shape());
        assert_eq!(tape.value(z).data(), tape.value(x).data());
    }

    #[test]
    fn permute_places_elements_at_reindexed_positions() {
        let mut tape = Tape::new();
        // (2, 3) -> transpose -> (3, 2)
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let cat = tape.concat(0, &[a, b]).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = tape.slice_axis0(cat, 1, 2).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(b).data());
    }

    #[test]
    fn concat_rejects_mismatched_non_axis_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2]));
        let b = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(tape.concat(0, &[a, b]).is_err());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn sum_backward_broadcasts_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[2.0, 5.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn div_gradients_match_quotient_rule() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[3.0, -1.0]), true);
        let b = tape.leaf(t(&[2], &[2.0, 4.0]), true);
        let q = tape.div(a, b).unwrap();
        let s = tape.sum(q);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.5, 0.25]);
        assert_eq!(tape.grad(b).unwrap(), &[-3.0 / 4.0, 1.0 / 16.0]);
    }

    #[test]
    fn batch_norm_train_matches_direct_evaluation() {
        let mut tape = Tape::new();
        // One channel, four elements: mean 2.5, biased variance 1.25.
        let x = tape.constant(t(&[4, 1, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let gamma = tape.constant(t(&[1], &[2.0]));
        let beta = tape.constant(t(&[1], &[0.5]));
        let mut state = BatchNormState::new(1);
        let y = tape
            .batch_norm(x, gamma, beta, &mut state, BnMode::Train)
            .unwrap();
        let inv = 1.0 / (1.25f64 + state.epsilon).sqrt();
        for (i, v) in [1.0f64, 2.0, 3.0, 4.0].iter().enumerate() {
            let want = 2.0 * (v - 2.5) * inv + 0.5;
            assert!((tape.value(y).data()[i] - want).abs() < 1e-15);
        }
        // Running stats move by one momentum step from zero init.
        assert!((state.running_mean[0] - 0.1 * 2.5).abs() < 1e-15);
        assert!((state.running_var[0] - (0.9 * 1.0 + 0.1 * 1.25)).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_eval_uses_running_statistics() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[1.0, 3.0]));
        let gamma = tape.constant(t(&[1], &[1.0]));
        let beta = tape.constant(t(&[1], &[0.0]));
        let mut state = BatchNormState::new(1);
        state.running_mean[0] = 1.0;
        state.running_var[0] = 4.0;
        let y = tape
            .batch_norm(x, gamma, beta, &mut state, BnMode::Eval)
            .unwrap();
        let inv = 1.0 / (4.0f64 + state.epsilon).sqrt();
        assert!((tape.value(y).data()[0] - 0.0).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 2.0 * inv).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_train_rejects_single_element_batches() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let gamma = tape.constant(t(&[1], &[1.0]));
        let beta = tape.constant(t(&[1], &[0.0]));
        let mut state = BatchNormState::new(1);
        assert!(tape
            .batch_norm(x, gamma, beta, &mut state, BnMode::Train)
            .is_err());
    }

    #[test]
    fn constants_do_not_collect_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[2.0]), true);
        let b = tape.constant(t(&[1], &[3.0]));
        let p = tape.hadamard(a, b).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0]);
        assert!(tape.grad(b).is_none());
    }
}
