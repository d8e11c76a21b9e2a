//! Searchable edges and the fixed operations derived from them.
//!
//! Feature layout inside a layer is `(N, C, L)` for spectral networks and
//! `(N, C, H, W)` for the cube networks. In the cube case the 1-D spectral
//! convolution slides along the channel axis with a single shared filter,
//! the 2-D depthwise convolution filters every channel spatially, and the
//! full 3-D convolution treats the channel axis as depth of one volume.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::hyperkernel::{crop_centered, Candidate, HyperKernel, KernelKind, StructuralParams};
use crate::ndtensor::{ConvKind, Param, ParamRole, Tape, Tensor, Var};

/// How a cube network realizes its "3-D" convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Form {
    Conv3d,
    /// Spectral 1-D convolution, then spatial 2-D depthwise.
    Serial1dThen2dDw,
    /// Spatial 2-D depthwise, then spectral 1-D convolution.
    Serial2dDwThen1d,
    /// Both branches on the same input, outputs added.
    Parallel1d2dDw,
}

impl Form {
    pub const ALL: [Form; 4] = [
        Form::Conv3d,
        Form::Serial1dThen2dDw,
        Form::Serial2dDwThen1d,
        Form::Parallel1d2dDw,
    ];

    pub fn is_pair(self) -> bool {
        self != Form::Conv3d
    }

    pub fn name(self) -> &'static str {
        match self {
            Form::Conv3d => "conv3d",
            Form::Serial1dThen2dDw => "serial_1d_2ddw",
            Form::Serial2dDwThen1d => "serial_2ddw_1d",
            Form::Parallel1d2dDw => "parallel_1d_2ddw",
        }
    }
}

impl fmt::Display for Form {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Form {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Form::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown 3-D convolution form {s:?}")))
    }
}

/// Geometry of a searchable edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    /// 1-D convolution along the sequence of a spectral network, `C -> C`.
    Spectral,
    /// One of the cube forms, acting on `(N, C, H, W)`.
    Cube(Form),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaMode {
    /// Structural parameters are computed from the hyper kernels.
    Hyper,
    /// Independent structural parameters (two-tier ablation).
    Free,
}

impl FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hyper" => Ok(AlphaMode::Hyper),
            "free" => Ok(AlphaMode::Free),
            _ => Err(Error::Config(format!("unknown alpha mode {s:?}"))),
        }
    }
}

/// Role of one kernel inside an edge; decides how it is convolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum KernelRole {
    Sequence,
    Spectral,
    Spatial,
    Volume,
}

impl EdgeKind {
    fn roles(self) -> &'static [KernelRole] {
        match self {
            EdgeKind::Spectral => &[KernelRole::Sequence],
            EdgeKind::Cube(Form::Conv3d) => &[KernelRole::Volume],
            EdgeKind::Cube(_) => &[KernelRole::Spectral, KernelRole::Spatial],
        }
    }

    /// Expected rank of edge inputs, batch axis included.
    pub fn input_rank(self) -> usize {
        match self {
            EdgeKind::Spectral => 3,
            EdgeKind::Cube(_) => 4,
        }
    }
}

fn kernel_shape(role: KernelRole, channels: usize, extent: usize) -> Vec<usize> {
    match role {
        KernelRole::Sequence => vec![channels, channels, extent],
        KernelRole::Spectral => vec![1, 1, extent],
        KernelRole::Spatial => vec![channels, 1, extent, extent],
        KernelRole::Volume => vec![1, 1, extent, extent, extent],
    }
}

/// Convolves `x` with kernel `w` according to `role`.
fn apply_kernel(tape: &mut Tape, role: KernelRole, x: Var, w: Var) -> Result<Var> {
    match role {
        KernelRole::Sequence => tape.conv(x, w, ConvKind::Standard1d),
        KernelRole::Spatial => tape.conv(x, w, ConvKind::Depthwise2d),
        KernelRole::Spectral | KernelRole::Volume => {
            let shape = tape.value(x).shape().to_vec();
            let &[n, c, h, wd] = shape.as_slice() else {
                return Err(Error::shape(format!("cube edge expects (N, C, H, W), got {shape:?}")));
            };
            let xv = tape.reshape(x, &[n, 1, c, h, wd])?;
            let e = tape.value(w).shape()[2];
            let wv = if role == KernelRole::Spectral {
                tape.reshape(w, &[1, 1, e, 1, 1])?
            } else {
                w
            };
            let y = tape.conv(xv, wv, ConvKind::Standard3d)?;
            tape.reshape(y, &[n, c, h, wd])
        }
    }
}

/// Combines per-kernel operators (given as closures over the input) according to the edge form.
fn compose(
    tape: &mut Tape,
    kind: EdgeKind,
    x: Var,
    mut op: impl FnMut(&mut Tape, usize, Var) -> Result<Var>,
) -> Result<Var> {
    let rank = tape.value(x).rank();
    if rank != kind.input_rank() {
        return Err(Error::shape(format!(
            "{kind:?} edge expects rank-{} input, got {:?}",
            kind.input_rank(),
            tape.value(x).shape()
        )));
    }
    match kind {
        EdgeKind::Spectral | EdgeKind::Cube(Form::Conv3d) => op(tape, 0, x),
        EdgeKind::Cube(Form::Serial1dThen2dDw) => {
            let y = op(tape, 0, x)?;
            op(tape, 1, y)
        }
        EdgeKind::Cube(Form::Serial2dDwThen1d) => {
            let y = op(tape, 1, x)?;
            op(tape, 0, y)
        }
        EdgeKind::Cube(Form::Parallel1d2dDw) => {
            let a = op(tape, 0, x)?;
            let b = op(tape, 1, x)?;
            tape.add(a, b)
        }
    }
}

/// A searchable layer position: softmax-weighted mixture of every
/// candidate convolution of its hyper kernel(s).
#[derive(Clone, Debug)]
pub struct MixedEdge {
    kind: EdgeKind,
    channels: usize,
    kernels: Vec<HyperKernel>,
    alpha_mode: AlphaMode,
    free_alpha: Vec<Param>,
}

impl MixedEdge {
    /// New edge over `channels` feature channels with hyper kernels of size `size`.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        kind: EdgeKind,
        channels: usize,
        size: usize,
        alpha_mode: AlphaMode,
        rng: &mut R,
    ) -> Result<Self> {
        let kernels = kind
            .roles()
            .iter()
            .map(|&role| {
                let (kk, dims, out, inp) = match role {
                    KernelRole::Sequence => (KernelKind::Standard, 1, channels, channels),
                    KernelRole::Spectral => (KernelKind::Standard, 1, 1, 1),
                    KernelRole::Spatial => (KernelKind::Depthwise, 2, channels, channels),
                    KernelRole::Volume => (KernelKind::Standard, 3, 1, 1),
                };
                HyperKernel::random(format!("{name}.k{}", role_tag(role)), kk, dims, size, out, inp, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_kernels(name, kind, channels, kernels, alpha_mode)
    }

    /// Builds an edge from explicit hyper kernels (spectral first for pairs).
    pub fn from_kernels(
        name: &str,
        kind: EdgeKind,
        channels: usize,
        kernels: Vec<HyperKernel>,
        alpha_mode: AlphaMode,
    ) -> Result<Self> {
        let roles = kind.roles();
        if kernels.len() != roles.len() {
            return Err(Error::invalid(format!(
                "{kind:?} edge needs {} hyper kernels, got {}",
                roles.len(),
                kernels.len()
            )));
        }
        for (k, &role) in kernels.iter().zip(roles) {
            let expect = kernel_shape(role, channels, k.size());
            if k.weights.value.shape() != expect.as_slice() {
                return Err(Error::invalid(format!(
                    "{kind:?} edge: kernel for {role:?} must have shape {expect:?}, got {:?}",
                    k.weights.value.shape()
                )));
            }
        }
        let free_alpha = match alpha_mode {
            AlphaMode::Hyper => vec![],
            AlphaMode::Free => kernels
                .iter()
                .zip(roles)
                .map(|(k, &r)| {
                    Param::new(
                        format!("{name}.alpha{}", role_tag(r)),
                        Tensor::zeros(&[k.candidates()]),
                        ParamRole::FreeAlpha,
                    )
                })
                .collect(),
        };
        Ok(MixedEdge {
            kind,
            channels,
            kernels,
            alpha_mode,
            free_alpha,
        })
    }

    pub fn kind(&self) -> EdgeKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn alpha_mode(&self) -> AlphaMode {
        self.alpha_mode
    }

    pub fn kernels(&self) -> &[HyperKernel] {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut [HyperKernel] {
        &mut self.kernels
    }

    /// Overwrites the free structural parameters of kernel `k`.
    pub fn set_free_alpha(&mut self, k: usize, values: &[f64]) -> Result<()> {
        let p = self
            .free_alpha
            .get_mut(k)
            .ok_or_else(|| Error::invalid("edge has no free structural parameters"))?;
        if values.len() != p.value.len() {
            return Err(Error::shape(format!(
                "{} values for {} candidates",
                values.len(),
                p.value.len()
            )));
        }
        p.value = Tensor::vector(values);
        Ok(())
    }

    pub fn structural_params(&self) -> Vec<StructuralParams> {
        match self.alpha_mode {
            AlphaMode::Hyper => self.kernels.iter().map(HyperKernel::structural_params).collect(),
            AlphaMode::Free => self
                .free_alpha
                .iter()
                .map(|p| StructuralParams(p.value.data().to_vec()))
                .collect(),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.kernels
            .iter()
            .map(|k| &k.weights)
            .chain(&self.free_alpha)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.kernels
            .iter_mut()
            .map(|k| &mut k.weights)
            .chain(self.free_alpha.iter_mut())
            .collect()
    }

    /// Records the mixed-edge forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let roles = self.kind.roles();
        let mut mixed = Vec::with_capacity(self.kernels.len());
        for (i, k) in self.kernels.iter().enumerate() {
            let kv = tape.param(&k.weights);
            let alpha = match self.alpha_mode {
                AlphaMode::Hyper => k.alpha_on(tape, kv),
                AlphaMode::Free => tape.param(&self.free_alpha[i]),
            };
            let w = tape.softmax(alpha)?;
            mixed.push(k.mix_on(tape, kv, w)?);
        }
        compose(tape, self.kind, x, |tape, i, inp| {
            apply_kernel(tape, roles[i], inp, mixed[i])
        })
    }

    /// Argmax candidate of every kernel.
    pub fn derive(&self) -> DerivedOp {
        DerivedOp {
            kind: self.kind,
            ops: self.structural_params().iter().map(StructuralParams::argmax).collect(),
        }
    }
}

fn role_tag(role: KernelRole) -> &'static str {
    match role {
        KernelRole::Sequence => "seq",
        KernelRole::Spectral => "spec",
        KernelRole::Spatial => "dw",
        KernelRole::Volume => "vol",
    }
}

/// Standalone forward of one edge on an input tensor.
pub fn forward_mixed(edge: &MixedEdge, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = edge.forward(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

/// Selected candidates of one edge. For pair forms the order is
/// `(spectral 1-D, spatial depthwise)` regardless of execution order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DerivedOp {
    pub kind: EdgeKind,
    pub ops: Vec<Candidate>,
}

impl DerivedOp {
    pub fn new(kind: EdgeKind, ops: Vec<Candidate>) -> Result<Self> {
        if ops.len() != kind.roles().len() {
            return Err(Error::invalid(format!(
                "{kind:?} needs {} selected candidates, got {}",
                kind.roles().len(),
                ops.len()
            )));
        }
        Ok(DerivedOp { kind, ops })
    }
}

pub fn derive(edge: &MixedEdge) -> DerivedOp {
    edge.derive()
}

/// A derived edge: plain convolution(s) at the selected extents.
#[derive(Clone, Debug)]
pub struct FixedOp {
    derived: DerivedOp,
    channels: usize,
    weights: Vec<Param>,
}

impl FixedOp {
    /// Fresh weights with the usual fan-in scaled uniform initialization.
    pub fn random<R: Rng + ?Sized>(name: &str, derived: DerivedOp, channels: usize, rng: &mut R) -> Result<Self> {
        let weights = derived
            .kind
            .roles()
            .iter()
            .zip(&derived.ops)
            .map(|(&role, c)| {
                let shape = kernel_shape(role, channels, c.extent());
                let fan_in: usize = shape[1..].iter().product();
                let w = Tensor::uniform(&shape, 1.0 / (fan_in as f64).sqrt(), rng);
                Param::new(format!("{name}.w{}", role_tag(role)), w, ParamRole::Weight)
            })
            .collect();
        Self::check(&derived)?;
        Ok(FixedOp {
            derived,
            channels,
            weights,
        })
    }

    /// Uses the given weights (spectral first for pairs).
    pub fn from_weights(name: &str, derived: DerivedOp, channels: usize, weights: Vec<Tensor>) -> Result<Self> {
        Self::check(&derived)?;
        let roles = derived.kind.roles();
        if weights.len() != roles.len() {
            return Err(Error::invalid(format!("expected {} weight tensors", roles.len())));
        }
        let weights = roles
            .iter()
            .zip(&derived.ops)
            .zip(weights)
            .map(|((&role, c), w)| {
                let shape = kernel_shape(role, channels, c.extent());
                if w.shape() != shape.as_slice() {
                    return Err(Error::shape(format!(
                        "{role:?} weight must have shape {shape:?}, got {:?}",
                        w.shape()
                    )));
                }
                Ok(Param::new(format!("{name}.w{}", role_tag(role)), w, ParamRole::Weight))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FixedOp {
            derived,
            channels,
            weights,
        })
    }

    fn check(derived: &DerivedOp) -> Result<()> {
        if derived.ops.len() != derived.kind.roles().len() {
            return Err(Error::invalid(format!(
                "{:?} has the wrong number of selected candidates",
                derived.kind
            )));
        }
        Ok(())
    }

    pub fn derived(&self) -> &DerivedOp {
        &self.derived
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> Vec<&Param> {
        self.weights.iter().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.weights.iter_mut().collect()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let roles = self.derived.kind.roles();
        let ws: Vec<Var> = self.weights.iter().map(|p| tape.param(p)).collect();
        compose(tape, self.derived.kind, x, |tape, i, inp| {
            apply_kernel(tape, roles[i], inp, ws[i])
        })
    }
}

/// Fixed operation for `derived` with fresh random weights sized to the
/// selected extents.
pub fn instantiate<R: Rng + ?Sized>(name: &str, derived: &DerivedOp, edge: &MixedEdge, rng: &mut R) -> Result<FixedOp> {
    if derived.kind != edge.kind {
        return Err(Error::invalid(format!(
            "derived op for {:?} does not fit a {:?} edge",
            derived.kind, edge.kind
        )));
    }
    for (c, k) in derived.ops.iter().zip(&edge.kernels) {
        if c.s() > k.candidates() {
            return Err(Error::invalid(format!(
                "candidate {} out of range 1..={}",
                c.s(),
                k.candidates()
            )));
        }
    }
    FixedOp::random(name, derived.clone(), edge.channels, rng)
}

/// Fixed operation for the edge's own selection, reusing the cropped
/// hyper-kernel weights instead of fresh ones.
pub fn inherit(name: &str, edge: &MixedEdge) -> Result<FixedOp> {
    let derived = edge.derive();
    let weights = edge
        .kernels
        .iter()
        .zip(&derived.ops)
        .map(|(k, c)| crop_centered(&k.weights.value, k.dims(), c.extent()))
        .collect::<Result<Vec<_>>>()?;
    FixedOp::from_weights(name, derived, edge.channels, weights)
}
