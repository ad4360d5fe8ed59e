//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in execution order; [`Graph::backward`]
//! walks the tape in reverse. Parameters are copied onto the tape by name
//! and their gradients can be folded back into a [`NetworkWeights`].

use std::collections::HashMap;

use super::kernels::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, conv3d_backward,
    conv3d_forward, Activation, BatchNormMode, Conv2dGeometry, Conv3dGeometry,
};
use super::{check_shape, NetworkWeights, Real, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeometry,
        col: Vec<T>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv3dGeometry,
        cols: Vec<Vec<T>>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Act(Var, Activation),
    Slice {
        x: Var,
        offset: usize,
    },
    Stack(Vec<Var>),
    Select {
        x: Var,
        offset: usize,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mode: BatchNormMode,
    },
    Mse {
        pred: Var,
        dpred: Vec<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a train-mode batchnorm on the tape.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant input that still receives a gradient (used by the checker).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Loads a named parameter onto the tape once; later calls reuse it.
    pub fn param(&mut self, weights: &NetworkWeights<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = weights.get(name)?;
        let mut value = Tensor::from_vec(t.shape(), t.data().to_vec())?;
        value.set_requires_grad(false);
        let needs = t.requires_grad();
        let v = self.push(value, Op::Param, needs);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bshape = b.map(|b| self.shape(b).to_vec());
        let geom = Conv2dGeometry::check(self.shape(x), self.shape(w), bshape.as_deref())?;
        let (out, col) = conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec(&[geom.cout, geom.h, geom.w], out)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, col }, needs))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let geom = Conv3dGeometry::check(self.shape(x), self.shape(w), self.shape(b))?;
        let (out, cols) = conv3d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::from_vec(&[geom.len, geom.cout, geom.h, geom.w], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Conv3d { x, w, b, geom, cols }, needs))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        check_shape(name, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::from_vec(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |p, q| p + q)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |p, q| p * q)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = super::kernels::apply_activation(self.value(x), kind);
        let needs = self.needs(x);
        self.push(value, Op::Act(x, kind), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    /// Channels `[start, start+len)` of a `[C, H, W]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || start + len > shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "slice_channels",
                expected: vec![start + len, 0, 0],
                actual: shape,
            });
        }
        let plane = shape[1] * shape[2];
        let data = self.value(x).data()[start * plane..(start + len) * plane].to_vec();
        let value = Tensor::from_vec(&[len, shape[1], shape[2]], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Slice { x, offset: start * plane }, needs))
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Invalid("stack of zero tensors".into()))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(xs.len() * self.value(*first).len());
        for &x in xs {
            check_shape("stack", &inner, self.shape(x))?;
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&inner);
        let value = Tensor::from_vec(&shape, data)?;
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(value, Op::Stack(xs.to_vec()), needs))
    }

    /// Entry `index` along the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "select",
                expected: vec![index + 1],
                actual: shape,
            });
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[index * inner..(index + 1) * inner].to_vec();
        let value = Tensor::from_vec(&shape[1..], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Select { x, offset: index * inner }, needs))
    }

    /// Batchnorm over the spatial dims of `[C, H, W]`.
    ///
    /// Returns the batch statistics in train mode so the caller can fold
    /// them into its moving averages.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        moving_mean: &[T],
        moving_var: &[T],
        mode: BatchNormMode,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        if !(eps > T::zero()) {
            return Err(TensorError::NonPositiveEpsilon(eps.as_f64()));
        }
        let shape = self.shape(x).to_vec();
        let c = shape.first().copied().unwrap_or(0);
        check_shape("batchnorm scale", &[c], self.shape(scale))?;
        check_shape("batchnorm shift", &[c], self.shape(shift))?;
        if moving_mean.len() != c || moving_var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm moving stats",
                expected: vec![c],
                actual: vec![moving_mean.len()],
            });
        }
        let fwd = batchnorm_forward(
            self.value(x).data(),
            c,
            self.value(scale).data(),
            self.value(shift).data(),
            moving_mean,
            moving_var,
            mode,
            eps,
        );
        let value = Tensor::from_vec(&shape, fwd.out)?;
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                mode,
            },
            needs,
        );
        let stats = (mode == BatchNormMode::Train).then_some(BatchStats {
            mean: fwd.batch_mean,
            var: fwd.batch_var,
        });
        Ok((v, stats))
    }

    /// Scalar mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let (loss, dpred) = super::kernels::mse_loss(self.value(pred), target)?;
        let needs = self.needs(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, dpred }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                expected: vec![1],
                actual: self.shape(loss).to_vec(),
            });
        }
        self.value(loss).ensure_finite("loss")?;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            let send = |v: Var, delta: &[T], grads: &mut Vec<Option<Vec<T>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match grads[v.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, &d)| *a += d),
                    None => grads[v.0] = Some(delta.to_vec()),
                }
            };
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::Conv2d { x, w, b, geom, col } => {
                    let (gin, gk, gb) =
                        conv2d_backward(geom, &g, col, self.value(*w).data(), self.needs(*x));
                    if let Some(gin) = gin {
                        send(*x, &gin, &mut grads);
                    }
                    send(*w, &gk, &mut grads);
                    if let Some(b) = b {
                        send(*b, &gb, &mut grads);
                    }
                }
                Op::Conv3d { x, w, b, geom, cols } => {
                    let (gin, gk, gb) = conv3d_backward(geom, &g, cols, self.value(*w).data());
                    send(*x, &gin, &mut grads);
                    send(*w, &gk, &mut grads);
                    send(*b, &gb, &mut grads);
                }
                Op::Add(a, b) => {
                    send(*a, &g, &mut grads);
                    send(*b, &g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let va = self.value(*a).data();
                    let vb = self.value(*b).data();
                    if self.needs(*a) {
                        let d: Vec<T> = g.iter().zip(vb).map(|(&g, &q)| g * q).collect();
                        send(*a, &d, &mut grads);
                    }
                    if self.needs(*b) {
                        let d: Vec<T> = g.iter().zip(va).map(|(&g, &p)| g * p).collect();
                        send(*b, &d, &mut grads);
                    }
                }
                Op::Act(x, kind) => {
                    let d: Vec<T> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&g, &y)| g * kind.derivative_from_output(y))
                        .collect();
                    send(*x, &d, &mut grads);
                }
                Op::Slice { x, offset } | Op::Select { x, offset } => {
                    if self.needs(*x) {
                        let mut d = vec![T::zero(); self.value(*x).len()];
                        d[*offset..*offset + g.len()].copy_from_slice(&g);
                        send(*x, &d, &mut grads);
                    }
                }
                Op::Stack(xs) => {
                    let inner = g.len() / xs.len();
                    for (i, x) in xs.iter().enumerate() {
                        send(*x, &g[i * inner..(i + 1) * inner], &mut grads);
                    }
                }
                Op::BatchNorm {
                    x,
                    scale,
                    shift,
                    xhat,
                    inv_std,
                    mode,
                } => {
                    let (dx, dscale, dshift) =
                        batchnorm_backward(&g, xhat, inv_std, self.value(*scale).data(), *mode);
                    send(*x, &dx, &mut grads);
                    send(*scale, &dscale, &mut grads);
                    send(*shift, &dshift, &mut grads);
                }
                Op::Mse { pred, dpred } => {
                    let d: Vec<T> = dpred.iter().map(|&v| v * g[0]).collect();
                    send(*pred, &d, &mut grads);
                }
                Op::Sum(x) => {
                    let d = vec![g[0]; self.value(*x).len()];
                    send(*x, &d, &mut grads);
                }
            }
            grads[idx] = Some(g);
        }

        let mut params = HashMap::new();
        for (name, &v) in &self.params {
            if let Some(g) = grads[v.0].as_ref() {
                if g.iter().any(|x| x.is_nan()) {
                    return Err(TensorError::NanGradient { name: name.clone() });
                }
            }
            params.insert(name.clone(), v);
        }
        Ok(Gradients { grads, params })
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. a tape node; `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).and_then(|&v| self.get(v))
    }

    /// Adds parameter gradients into the weights' own gradient buffers.
    pub fn accumulate_into(&self, weights: &mut NetworkWeights<T>) -> Result<()> {
        for (name, tensor, _) in weights.iter_mut() {
            if let Some(g) = self.params.get(name).and_then(|&v| self.grads[v.0].as_deref()) {
                tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}
