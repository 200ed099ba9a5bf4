//! Operation tape for reverse-mode differentiation.
//!
//! A forward pass appends one node per op; `gradients` walks the nodes in
//! reverse and accumulates vector-Jacobian products. Nodes are never removed,
//! so a tape is built and consumed for one step and then dropped.

use super::conv::{conv2d_backward, conv2d_forward, Conv2dSpec, ConvGeom};
use super::norm::{
    batch_norm_backward, batch_norm_forward, standardize_backward, standardize_forward, BatchNormCache, BatchNormMode,
    RunningStats, StandardizeCache,
};
use super::pool::{pool_backward, pool_forward, PoolMode};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::gains::Activation;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulOuter {
        x: Var,
        s: Var,
    },
    AddChannel {
        x: Var,
        b: Var,
    },
    Activation {
        x: Var,
        kind: Activation,
        gamma: T,
    },
    Sigmoid(Var),
    Pool {
        x: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Standardize {
        w: Var,
        cache: StandardizeCache<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

/// Gradients of a scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a node; zeros if the node did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Write parameter gradients into `store` (zeroing it first). Parameters
    /// never touched by the tape end up with zero gradients.
    pub fn write_to(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.zero_grad();
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.get_mut(id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Make every op fail with [`Error::NonFinite`] when it produces NaN/Inf.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Outputs of every batch-normalization op recorded so far, in order.
    pub fn batch_norm_outputs(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::BatchNorm { .. }))
            .map(|(i, _)| Var(i))
            .collect()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf (e.g. an input whose gradient is wanted).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Snapshot a parameter's current value onto the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).value.clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: &Conv2dSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), spec)?;
        let out = conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(&geom.out_shape(), out)?;
        let ng = self.needs(x) || self.needs(w);
        self.push("conv2d", value, Op::Conv2d { x, w, geom }, ng)
    }

    /// `out[i, j] = Σₖ x[i, k]·w[j, k] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", format!("x {xs:?}, w {ws:?}")));
        }
        let (batch, n, m) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); batch * m];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [m] {
                return Err(shape_err("linear", format!("bias {:?} for {m} outputs", bv.shape())));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv.data());
            }
        }
        T::gemm(
            batch,
            n,
            m,
            T::one(),
            self.value(x).data(),
            (n as isize, 1),
            self.value(w).data(),
            (1, n as isize),
            T::one(),
            &mut out,
            (m as isize, 1),
        );
        let value = Tensor::new(&[batch, m], out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push("linear", value, Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let value = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("add", value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let value = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("sub", value, Op::Sub(a, b), ng)
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let value = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("mul", value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).scale(c);
        let ng = self.needs(a);
        self.push("scale", value, Op::Scale(a, c), ng)
    }

    /// Broadcast multiply: `s` has a shape that is a prefix of `x`'s shape and
    /// each entry of `s` scales the corresponding trailing block of `x`.
    /// Covers per-unit weight gains, SE channel gates, per-sample masks and
    /// scalar multipliers (rank-0 `s`).
    pub fn mul_outer(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        if ss.len() > xs.len() || xs[..ss.len()] != *ss {
            return Err(shape_err("mul_outer", format!("{ss:?} is not a prefix of {xs:?}")));
        }
        let outer = self.value(s).numel();
        let inner = self.value(x).numel() / outer.max(1);
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (o, chunk) in out.chunks_mut(inner.max(1)).enumerate() {
            let f = sv[o];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let value = Tensor::new(self.shape(x), out)?;
        let ng = self.needs(x) || self.needs(s);
        self.push("mul_outer", value, Op::MulOuter { x, s }, ng)
    }

    /// Add a per-channel bias to a `[B, C, ...]` tensor.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b);
        if xs.len() < 2 || bs != [xs[1]] {
            return Err(shape_err("add_channel", format!("bias {bs:?} for input {xs:?}")));
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(inner.max(1)).enumerate() {
            let bias = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let value = Tensor::new(&xs, out)?;
        let ng = self.needs(x) || self.needs(b);
        self.push("add_channel", value, Op::AddChannel { x, b }, ng)
    }

    /// Elementwise `gamma · g(x)`.
    pub fn activation(&mut self, x: Var, kind: Activation, gamma: T) -> Result<Var> {
        let value = self.value(x).map(|v| gamma * kind.eval(v));
        let ng = self.needs(x);
        self.push("activation", value, Op::Activation { x, kind, gamma }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push("sigmoid", value, Op::Sigmoid(x), ng)
    }

    pub fn pool2d(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let (shape, out, argmax) = pool_forward(mode, self.shape(x), self.value(x).data())?;
        let value = Tensor::new(&shape, out)?;
        let ng = self.needs(x);
        self.push("pool2d", value, Op::Pool { x, mode, argmax }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        self.push("reshape", value, Op::Reshape(x), ng)
    }

    /// Per-unit (axis 0) scaled weight standardization.
    pub fn standardize(&mut self, w: Var, eps_var: T) -> Result<Var> {
        let shape = self.shape(w).to_vec();
        let units = *shape.first().ok_or_else(|| shape_err("standardize", "scalar weight"))?;
        let fan_in = self.value(w).numel() / units.max(1);
        if fan_in < 2 {
            return Err(shape_err("standardize", format!("fan-in {fan_in} < 2")));
        }
        let (out, cache) = standardize_forward(self.value(w).data(), units, eps_var);
        let value = Tensor::new(&shape, out)?;
        let ng = self.needs(w);
        self.push("standardize", value, Op::Standardize { w, cache }, ng)
    }

    /// Per-channel batch normalization of a `[B, C, ...]` tensor. Train mode
    /// updates `running` in place.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        running: &mut RunningStats,
        eps: T,
    ) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Config("batch norm eps must be > 0".into()));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("batch_norm", format!("input {xs:?}")));
        }
        let (b, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.mean.len() != c {
            return Err(shape_err(
                "batch_norm",
                format!("affine params do not match {c} channels"),
            ));
        }
        if mode == BatchNormMode::Train && b * inner < 2 {
            return Err(shape_err(
                "batch_norm",
                "train mode needs at least 2 values per channel",
            ));
        }
        let (y, cache, stats) = batch_norm_forward(
            self.value(x).data(),
            (b, c, inner),
            self.value(gamma).data(),
            self.value(beta).data(),
            mode,
            running,
            eps,
        );
        if let Some((mean, var)) = stats {
            let count = (b * inner) as f64;
            let unbiased = count / (count - 1.0);
            let m = running.momentum;
            for ch in 0..c {
                running.mean[ch] = (1.0 - m) * running.mean[ch] + m * mean[ch];
                running.var[ch] = (1.0 - m) * running.var[ch] + m * var[ch] * unbiased;
            }
        }
        let value = Tensor::new(&xs, y)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push("batch_norm", value, Op::BatchNorm { x, gamma, beta, cache }, ng)
    }

    /// Mean over the batch of `−Σ_c t_c · log softmax(z)_c`; `targets` is a
    /// `[B, C]` distribution per row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let zs = self.shape(logits).to_vec();
        if zs.len() != 2 || targets.shape() != zs.as_slice() {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {zs:?}, targets {:?}", targets.shape()),
            ));
        }
        let (b, c) = (zs[0], zs[1]);
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for i in 0..b {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let denom = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
            let log_denom = denom.ln();
            for j in 0..c {
                let logp = row[j] - max - log_denom;
                probs[i * c + j] = logp.exp();
                loss -= targets.data()[i * c + j] * logp;
            }
        }
        let value = Tensor::scalar(loss / T::lit(b as f64));
        let ng = self.needs(logits);
        self.push(
            "softmax_cross_entropy",
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.data().to_vec(),
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push("sum", value, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean());
        let ng = self.needs(x);
        self.push("mean", value, Op::Mean(x), ng)
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, params, shapes })
    }

    /// Gradients of `loss` written into the parameter store.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.gradients(loss)?.write_to(store)
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, d: Tensor<T>| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => {
                    *slot = Some(d);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, geom } => {
                let (need_dx, need_dw) = (self.needs(*x), self.needs(*w));
                let (dx, dw) = conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    need_dx,
                    need_dw,
                );
                if need_dx {
                    acc(*x, Tensor::new(self.shape(*x), dx)?)?;
                }
                if need_dw {
                    acc(*w, Tensor::new(self.shape(*w), dw)?)?;
                }
            }
            Op::Linear { x, w, b } => {
                let (batch, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let m = self.shape(*w)[0];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); batch * n];
                    T::gemm(
                        batch,
                        m,
                        n,
                        T::one(),
                        g.data(),
                        (m as isize, 1),
                        self.value(*w).data(),
                        (n as isize, 1),
                        T::zero(),
                        &mut dx,
                        (n as isize, 1),
                    );
                    acc(*x, Tensor::new(&[batch, n], dx)?)?;
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); m * n];
                    T::gemm(
                        m,
                        batch,
                        n,
                        T::one(),
                        g.data(),
                        (1, m as isize),
                        self.value(*x).data(),
                        (n as isize, 1),
                        T::zero(),
                        &mut dw,
                        (n as isize, 1),
                    );
                    acc(*w, Tensor::new(&[m, n], dw)?)?;
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); m];
                    for row in g.data().chunks(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::new(&[m], db)?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.zip_map(self.value(*b), |p, q| p * q)?)?;
                }
                if self.needs(*b) {
                    acc(*b, g.zip_map(self.value(*a), |p, q| p * q)?)?;
                }
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::MulOuter { x, s } => {
                let sv = self.value(*s);
                let outer = sv.numel();
                let inner = g.numel() / outer.max(1);
                if self.needs(*x) {
                    let mut dx = g.data().to_vec();
                    for (o, chunk) in dx.chunks_mut(inner.max(1)).enumerate() {
                        let f = sv.data()[o];
                        chunk.iter_mut().for_each(|v| *v *= f);
                    }
                    acc(*x, Tensor::new(self.shape(*x), dx)?)?;
                }
                if self.needs(*s) {
                    let xv = self.value(*x).data();
                    let ds: Vec<T> = (0..outer)
                        .map(|o| {
                            let r = o * inner..(o + 1) * inner;
                            g.data()[r.clone()]
                                .iter()
                                .zip(&xv[r])
                                .fold(T::zero(), |a, (&p, &q)| a + p * q)
                        })
                        .collect();
                    acc(*s, Tensor::new(sv.shape(), ds)?)?;
                }
            }
            Op::AddChannel { x, b } => {
                acc(*x, g.clone())?;
                if self.needs(*b) {
                    let xs = self.shape(*x);
                    let c = xs[1];
                    let inner: usize = xs[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in g.data().chunks(inner.max(1)).enumerate() {
                        db[i % c] += chunk.iter().fold(T::zero(), |a, &v| a + v);
                    }
                    acc(*b, Tensor::new(&[c], db)?)?;
                }
            }
            Op::Activation { x, kind, gamma } => {
                let d = g.zip_map(self.value(*x), |gi, xi| gi * *gamma * kind.derivative(xi))?;
                acc(*x, d)?;
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, |gi, yi| gi * yi * (T::one() - yi))?;
                acc(*x, d)?;
            }
            Op::Pool { x, mode, argmax } => {
                let dx = pool_backward(*mode, self.shape(*x), g.data(), argmax);
                acc(*x, Tensor::new(self.shape(*x), dx)?)?;
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x))?)?,
            Op::Standardize { w, cache } => {
                let units = self.shape(*w)[0];
                let dw = standardize_backward(cache, units, g.data());
                acc(*w, Tensor::new(self.shape(*w), dw)?)?;
            }
            Op::BatchNorm { x, gamma, beta, cache } => {
                let xs = self.shape(*x);
                let inner: usize = xs[2..].iter().product();
                let dims = (xs[0], xs[1], inner);
                let (dx, dg, db) = batch_norm_backward(cache, dims, self.value(*gamma).data(), g.data());
                acc(*x, Tensor::new(xs, dx)?)?;
                acc(*gamma, Tensor::new(&[dims.1], dg)?)?;
                acc(*beta, Tensor::new(&[dims.1], db)?)?;
            }
            Op::SoftmaxCrossEntropy { logits, probs, targets } => {
                let zs = self.shape(*logits);
                let (b, c) = (zs[0], zs[1]);
                let scale = g.item() / T::lit(b as f64);
                let d: Vec<T> = (0..b * c).map(|i| (probs[i] - targets[i]) * scale).collect();
                acc(*logits, Tensor::new(zs, d)?)?;
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.item()))?,
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).numel() as f64);
                acc(*x, Tensor::full(self.shape(*x), g.item() / n))?;
            }
        }
        Ok(())
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
