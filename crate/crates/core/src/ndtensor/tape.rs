//! Reverse-mode gradient recording.
//!
//! A `Tape` records one forward pass. Every primitive appends a node holding
//! its output value and enough state to push gradients back to its inputs.
//! `backward` accumulates into per-node gradient buffers, so calling it twice
//! without `zero_grad` doubles every gradient.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ndtensor::kernels::{self, ConvGeom, NormGeom};
use crate::ndtensor::ops::{self, ConvKind, NormMode, NORM_EPS};
use crate::ndtensor::{Param, ParamId, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for operations defined outside this module.
pub trait CustomBackward {
    /// Gradients for each input, in input order. `None` means no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Reshape(Var),
    ChannelBias {
        x: Var,
        b: Var,
        channels: usize,
        inner: usize,
    },
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Norm(Box<NormRecord>),
    Pool {
        x: Var,
        map: Vec<usize>,
        scale: f64,
    },
    GlobalAvg {
        x: Var,
        inner: usize,
    },
    Upsample {
        x: Var,
        lead: usize,
        src: (usize, usize),
        dst: (usize, usize),
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Target>,
        classes: usize,
        inner: usize,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward>,
    },
}

struct NormRecord {
    x: Var,
    gamma: Var,
    beta: Var,
    geom: NormGeom,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

/// One supervised position in a `(N, K, P)` logit tensor: sample `n`,
/// flattened spatial index `p`, class `class`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Target {
    pub n: usize,
    pub p: usize,
    pub class: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Statistics produced by a normalization node in batch-statistics mode.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a parameter (once per tape) and returns its leaf.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.leaf(p.value.clone(), p.role.trainable());
        self.params.insert(p.id(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Accumulated gradient of a registered parameter.
    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&v| self.grad(v))
    }

    /// Adds the recorded gradients into each parameter's `grad` buffer.
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Param>) {
        for p in params {
            if let Some(g) = self.param_grad(p.id()) {
                p.grad.axpy(1.0, g).expect("tape gradient shape matches its parameter");
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ----- primitives -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.check_same_shape(y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let v = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Adds a per-channel bias `b: (C)` to `x: (N, C, ...)`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let bv = self.value(b);
        if xs.len() < 2 || bv.shape() != [xs[1]] {
            return Err(Error::shape(format!(
                "channel bias {:?} does not match input {xs:?}",
                bv.shape()
            )));
        }
        let (channels, inner) = (xs[1], xs[2..].iter().product::<usize>());
        let mut out = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let c = i % channels;
            chunk.iter_mut().for_each(|v| *v += bd[c]);
        }
        let rg = self.needs(&[x, b]);
        Ok(self.push(out, Op::ChannelBias { x, b, channels, inner }, rg))
    }

    /// Same-centered stride-1 convolution of a batched input `(N, C, ...)`.
    pub fn conv(&mut self, x: Var, w: Var, kind: ConvKind) -> Result<Var> {
        let geom = ops::conv_geometry(kind, self.value(x).shape(), self.value(w).shape())?;
        let y = kernels::conv_forward(self.value(x).data(), self.value(w).data(), &geom);
        let mut shape = self.value(x).shape().to_vec();
        shape[1] = geom.cout;
        let rg = self.needs(&[x, w]);
        Ok(self.push(Tensor::from_parts(shape, y), Op::Conv { x, w, geom }, rg))
    }

    /// `x: (N, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::shape(format!("linear expects (N, in), got {xs:?}")));
        }
        ops::check_linear(xs[1], self.value(w).shape(), self.value(b).shape())?;
        let fout = self.value(w).shape()[0];
        let y = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            xs[0],
            xs[1],
            fout,
        );
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(Tensor::from_parts(vec![xs[0], fout], y), Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = ops::relu(self.value(x));
        let rg = self.needs(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    /// Normalization of `(N, C, ...)` followed by a per-channel affine map.
    ///
    /// With `fixed = Some((mean, var))` (batch mode only) the given running
    /// statistics are used; otherwise statistics come from `x` and are
    /// returned so callers can update running estimates.
    pub fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        fixed: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let geom = ops::norm_geometry(self.value(x).shape(), mode)?;
        let c = geom.channels;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!(
                "normalization affine parameters must have shape [{c}]"
            )));
        }
        let (mean, var, batch_stats) = match fixed {
            Some((m, v)) => {
                if geom.groups.is_some() || m.len() != c || v.len() != c {
                    return Err(Error::shape("running statistics only apply per channel in batch mode"));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let (m, v) = kernels::norm_stats(self.value(x).data(), &geom);
                (m, v, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let xhat = kernels::norm_apply(self.value(x).data(), &geom, &mean, &inv_std);
        let mut y = xhat.clone();
        ops::apply_affine(&mut y, &geom, self.value(gamma).data(), self.value(beta).data());
        let shape = self.value(x).shape().to_vec();
        let rg = self.needs(&[x, gamma, beta]);
        let stats = batch_stats.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let rec = NormRecord {
            x,
            gamma,
            beta,
            geom,
            xhat,
            inv_std,
            batch_stats,
        };
        Ok((
            self.push(Tensor::from_parts(shape, y), Op::Norm(Box::new(rec)), rg),
            stats,
        ))
    }

    pub fn pool_avg(&mut self, x: Var, factor: usize, axes: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        ops::check_pool(&shape, factor, axes)?;
        let (out_shape, map) = kernels::pool_index_map(&shape, axes, factor);
        let scale = 1.0 / (factor as f64).powi(axes.len() as i32);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (v, &o) in self.value(x).data().iter().zip(&map) {
            out[o] += v * scale;
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Pool { x, map, scale }, rg))
    }

    /// `(N, C, ...) -> (N, C)` spatial mean.
    pub fn global_avg(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 3 {
            return Err(Error::shape(format!(
                "global average expects (N, C, ...), got {shape:?}"
            )));
        }
        let inner: usize = shape[2..].iter().product();
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![shape[0], shape[1]], data),
            Op::GlobalAvg { x, inner },
            rg,
        ))
    }

    pub fn upsample_bilinear(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (lead, h, w) = ops::upsample_dims(&shape, target)?;
        let y = ops::upsample_forward(self.value(x).data(), lead, (h, w), target);
        let mut out_shape = shape.clone();
        let r = shape.len();
        out_shape[r - 2] = target.0;
        out_shape[r - 1] = target.1;
        let rg = self.needs(&[x]);
        let op = Op::Upsample {
            x,
            lead,
            src: (h, w),
            dst: target,
        };
        Ok(self.push(Tensor::from_parts(out_shape, y), op, rg))
    }

    /// Softmax of a one-dimensional tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 1 {
            return Err(Error::shape(format!("softmax expects a vector, got {:?}", v.shape())));
        }
        let out = Tensor::vector(&ops::softmax(v.data()));
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Mean cross-entropy over `targets` for logits `(N, K)` or `(N, K, ...)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Target]) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("logits must be (N, K, ...), got {shape:?}")));
        }
        if targets.is_empty() {
            return Err(Error::invalid("cross entropy over an empty target set"));
        }
        let (n, k, inner) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
        let z = self.value(logits).data();
        let mut total = 0.0;
        for t in targets {
            if t.class >= k {
                return Err(Error::invalid(format!(
                    "label {} out of range for {k} classes",
                    t.class
                )));
            }
            if t.n >= n || t.p >= inner {
                return Err(Error::shape(format!("target {t:?} outside logits {shape:?}")));
            }
            let row = (0..k).map(|c| z[(t.n * k + c) * inner + t.p]);
            total += kernels::log_sum_exp(row) - z[(t.n * k + t.class) * inner + t.p];
        }
        let loss = total / targets.len() as f64;
        let rg = self.needs(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            classes: k,
            inner,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Records an externally defined operation.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn CustomBackward>) -> Var {
        let rg = self.needs(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        )
    }

    // ----- backward ---------------------------------------------------

    /// Accumulates `d root / d node` into every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut pending: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        pending[root.0] = Some(Tensor::ones(self.value(root).shape()));
        for i in (0..=root.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (input, gi) in self.input_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut pending[input.0] {
                    Some(acc) => acc.axpy(1.0, &gi)?,
                    slot => *slot = Some(gi),
                }
            }
            match &mut self.nodes[i].grad {
                Some(acc) => acc.axpy(1.0, &g)?,
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<f64>| Tensor::from_parts(val(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let ga = g.data().iter().zip(val(*b).data()).map(|(p, q)| p * q).collect();
                let gb = g.data().iter().zip(val(*a).data()).map(|(p, q)| p * q).collect();
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data()[0]))],
            Op::Reshape(a) => vec![(*a, like(*a, g.data().to_vec()))],
            Op::ChannelBias { x, b, channels, inner } => {
                let mut gb = vec![0.0; *channels];
                for (k, chunk) in g.data().chunks(*inner).enumerate() {
                    gb[k % channels] += chunk.iter().sum::<f64>();
                }
                vec![(*x, g.clone()), (*b, like(*b, gb))]
            }
            Op::Conv { x, w, geom } => {
                let (gx, gw) = kernels::conv_backward(val(*x).data(), val(*w).data(), g.data(), geom);
                vec![(*x, like(*x, gx)), (*w, like(*w, gw))]
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (val(*x).shape()[0], val(*x).shape()[1]);
                let fout = val(*w).shape()[0];
                let (gx, gw, gb) = kernels::linear_backward(val(*x).data(), val(*w).data(), g.data(), n, fin, fout);
                vec![(*x, like(*x, gx)), (*w, like(*w, gw)), (*b, like(*b, gb))]
            }
            Op::Relu(x) => {
                let gx = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*x, like(*x, gx))]
            }
            Op::Norm(rec) => {
                let geom = &rec.geom;
                let gamma = val(rec.gamma).data();
                let mut ggamma = vec![0.0; geom.channels];
                let mut gbeta = vec![0.0; geom.channels];
                let mut gxhat = vec![0.0; g.len()];
                for n in 0..geom.lead {
                    for c in 0..geom.channels {
                        let off = (n * geom.channels + c) * geom.inner;
                        #[allow(clippy::needless_range_loop)]
                        for k in off..off + geom.inner {
                            ggamma[c] += g.data()[k] * rec.xhat[k];
                            gbeta[c] += g.data()[k];
                            gxhat[k] = g.data()[k] * gamma[c];
                        }
                    }
                }
                let gx = if rec.batch_stats {
                    kernels::norm_backward_batch_stats(&gxhat, &rec.xhat, geom, &rec.inv_std)
                } else {
                    let mut gx = gxhat;
                    for n in 0..geom.lead {
                        for c in 0..geom.channels {
                            let s = geom.stat_of(n, c);
                            let off = (n * geom.channels + c) * geom.inner;
                            gx[off..off + geom.inner].iter_mut().for_each(|v| *v *= rec.inv_std[s]);
                        }
                    }
                    gx
                };
                vec![
                    (rec.x, like(rec.x, gx)),
                    (rec.gamma, like(rec.gamma, ggamma)),
                    (rec.beta, like(rec.beta, gbeta)),
                ]
            }
            Op::Pool { x, map, scale } => {
                let gx = map.iter().map(|&o| g.data()[o] * scale).collect();
                vec![(*x, like(*x, gx))]
            }
            Op::GlobalAvg { x, inner } => {
                let mut gx = Vec::with_capacity(val(*x).len());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv / *inner as f64, *inner));
                }
                vec![(*x, like(*x, gx))]
            }
            Op::Upsample { x, lead, src, dst } => {
                let gx = ops::upsample_backward(g.data(), *lead, *src, *dst);
                vec![(*x, like(*x, gx))]
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let dot: f64 = y.iter().zip(g.data()).map(|(a, b)| a * b).sum();
                let gx = y.iter().zip(g.data()).map(|(yv, gv)| yv * (gv - dot)).collect();
                vec![(*x, like(*x, gx))]
            }
            Op::CrossEntropy {
                logits,
                targets,
                classes,
                inner,
            } => {
                let z = val(*logits).data();
                let mut gz = vec![0.0; z.len()];
                let scale = g.data()[0] / targets.len() as f64;
                for t in targets {
                    let idx = |c: usize| (t.n * classes + c) * inner + t.p;
                    let lse = kernels::log_sum_exp((0..*classes).map(|c| z[idx(c)]));
                    for c in 0..*classes {
                        gz[idx(c)] += scale * (z[idx(c)] - lse).exp();
                    }
                    gz[idx(t.class)] -= scale;
                }
                vec![(*logits, like(*logits, gz))]
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                rule.backward(&ins, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, v)| gi.map(|t| (*v, t)))
                    .collect()
            }
        }
    }
}
