//! Block/layer network skeletons, their search and derived instances, and
//! architecture matrices.

mod arch;
mod template;

pub use arch::{ArchEntry, ArchitectureMatrix};
pub use template::{NetKind, NetworkTemplate, Scene, GROUP_NORM_GROUPS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mixedop::{self, AlphaMode, DerivedOp, FixedOp, MixedEdge};
use crate::ndtensor::{BatchStats, ConvKind, NormMode, Param, ParamRole, Tape, Tensor, Var};

/// Running-statistics momentum of batch normalization.
pub const NORM_MOMENTUM: f64 = 0.1;

fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
struct Pointwise {
    w: Param,
}

impl Pointwise {
    fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let w = fan_in_uniform(&[cout, cin], cin, rng);
        Pointwise {
            w: Param::new(format!("{name}.w"), w, ParamRole::Weight),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.w);
        tape.conv(x, w, ConvKind::Pointwise)
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: Param,
    b: Param,
}

impl Linear {
    fn new<R: Rng + ?Sized>(name: &str, fin: usize, fout: usize, rng: &mut R) -> Self {
        Linear {
            w: Param::new(
                format!("{name}.w"),
                fan_in_uniform(&[fout, fin], fin, rng),
                ParamRole::Weight,
            ),
            b: Param::new(format!("{name}.b"), fan_in_uniform(&[fout], fin, rng), ParamRole::Bias),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(&self.w), tape.param(&self.b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    mode: NormMode,
    gamma: Param,
    beta: Param,
    running_mean: Param,
    running_var: Param,
}

impl Norm {
    fn new(name: &str, channels: usize, mode: NormMode) -> Self {
        let p = |suffix: &str, t: Tensor, role| Param::new(format!("{name}.{suffix}"), t, role);
        Norm {
            mode,
            gamma: p("gamma", Tensor::ones(&[channels]), ParamRole::Norm),
            beta: p("beta", Tensor::zeros(&[channels]), ParamRole::Norm),
            running_mean: p("running_mean", Tensor::zeros(&[channels]), ParamRole::Buffer),
            running_var: p("running_var", Tensor::ones(&[channels]), ParamRole::Buffer),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let (g, b) = (tape.param(&self.gamma), tape.param(&self.beta));
        let fixed = (!ctx.train && self.mode == NormMode::Batch)
            .then(|| (self.running_mean.value.data(), self.running_var.value.data()));
        let (y, stats) = tape.normalize(x, g, b, self.mode, fixed)?;
        if self.mode == NormMode::Batch {
            if let Some(s) = stats {
                ctx.stats.push(s);
            }
        }
        Ok(tape.relu(y))
    }

    fn absorb(&mut self, s: &BatchStats) {
        let blend = |run: &mut Tensor, new: &[f64]| {
            for (r, v) in run.data_mut().iter_mut().zip(new) {
                *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * v;
            }
        };
        blend(&mut self.running_mean.value, &s.mean);
        blend(&mut self.running_var.value, &s.var);
    }

    fn params_mut(&mut self) -> [&mut Param; 4] {
        [
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }

    fn params(&self) -> [&Param; 4] {
        [&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }
}

/// Forward-pass context: train/eval flag plus collected batch statistics.
struct Ctx {
    train: bool,
    stats: Vec<BatchStats>,
}

/// Searchable or fixed operation at one layer position.
#[derive(Clone, Debug)]
pub enum Edge {
    Mixed(MixedEdge),
    Fixed(FixedOp),
}

impl Edge {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Edge::Mixed(e) => e.forward(tape, x),
            Edge::Fixed(f) => f.forward(tape, x),
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Edge::Mixed(e) => e.params(),
            Edge::Fixed(f) => f.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Edge::Mixed(e) => e.params_mut(),
            Edge::Fixed(f) => f.params_mut(),
        }
    }
}

/// Bottleneck layer: squeeze to a quarter of the width, edge, normalize and
/// rectify, expand back, add the input.
#[derive(Clone, Debug)]
pub struct Layer {
    squeeze: Pointwise,
    pub edge: Edge,
    norm: Norm,
    expand: Pointwise,
}

impl Layer {
    fn forward(&self, tape: &mut Tape, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let h = self.squeeze.forward(tape, x)?;
        let h = self.edge.forward(tape, h)?;
        let h = self.norm.forward(tape, h, ctx)?;
        let h = self.expand.forward(tape, h)?;
        tape.add(x, h)
    }

    /// Expand-convolution weights (zeroing them makes the layer an identity).
    pub fn expand_weights_mut(&mut self) -> &mut Tensor {
        &mut self.expand.w.value
    }

    /// Channel count at the layer input and output.
    pub fn width(&self) -> usize {
        self.expand.w.value.shape()[0]
    }

    /// Evaluation-mode pass of this layer alone.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut ctx = Ctx {
            train: false,
            stats: vec![],
        };
        let y = self.forward(&mut tape, xv, &mut ctx)?;
        Ok(tape.value(y).clone())
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.squeeze.w);
        out.extend(self.edge.params());
        out.extend(self.norm.params());
        out.push(&self.expand.w);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.squeeze.w);
        out.extend(self.edge.params_mut());
        out.extend(self.norm.params_mut());
        out.push(&mut self.expand.w);
    }
}

/// Average-pool by 2 then double the width with a pointwise convolution.
#[derive(Clone, Debug)]
struct Transition {
    widen: Pointwise,
    norm: Norm,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub layers: Vec<Layer>,
    transition: Option<Transition>,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum Stem {
    /// Linear map of the spectrum, then a pointwise lift of the resulting
    /// one-channel sequence.
    Spectral {
        linear: Linear,
        lift: Pointwise,
        norm: Norm,
    },
    Cube {
        conv: Pointwise,
        norm: Norm,
    },
}

#[derive(Clone, Debug)]
enum Head {
    Pooled(Linear),
    Map { conv: Pointwise, bias: Param },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetMode {
    Search,
    Derived,
}

/// A network built from a template, either with mixed edges (search) or
/// fixed operations (derived).
#[derive(Clone, Debug)]
pub struct Network {
    template: NetworkTemplate,
    mode: NetMode,
    stem: Stem,
    pub blocks: Vec<Block>,
    head: Head,
}

/// Output of a forward pass.
pub struct Forward {
    /// `(N, K)` for classifiers, `(N, K, H, W)` for segmentation.
    pub logits: Var,
    stats: Vec<BatchStats>,
}

impl Network {
    /// Search-mode network with one independent mixed edge per layer.
    pub fn search(template: &NetworkTemplate, alpha_mode: AlphaMode, seed: u64) -> Result<Self> {
        template.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = template.hyper_size;
        let kind = template.edge_kind();
        Self::assemble(template, NetMode::Search, &mut rng, |name, _, _, width, rng| {
            Ok(Edge::Mixed(MixedEdge::new(
                name,
                kind,
                width / 4,
                size,
                alpha_mode,
                rng,
            )?))
        })
    }

    /// Derived network with fresh weights for the architecture `arch`.
    pub fn derived(template: &NetworkTemplate, arch: &ArchitectureMatrix, seed: u64) -> Result<Self> {
        template.validate()?;
        let ops = arch.to_derived(template)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::assemble(template, NetMode::Derived, &mut rng, |name, b, l, width, rng| {
            Ok(Edge::Fixed(FixedOp::random(name, ops[b][l].clone(), width / 4, rng)?))
        })
    }

    /// Derived network that keeps every weight of this search network and
    /// replaces each mixed edge by its selected crops.
    pub fn inherit(&self) -> Result<Self> {
        self.require(NetMode::Search)?;
        let mut net = self.clone();
        for block in &mut net.blocks {
            for layer in &mut block.layers {
                let Edge::Mixed(e) = &layer.edge else { unreachable!() };
                let name = layer.squeeze.w.name.trim_end_matches(".squeeze.w").to_string() + ".edge";
                layer.edge = Edge::Fixed(mixedop::inherit(&name, e)?);
            }
        }
        net.mode = NetMode::Derived;
        Ok(net)
    }

    fn assemble(
        template: &NetworkTemplate,
        mode: NetMode,
        rng: &mut ChaCha8Rng,
        mut edge: impl FnMut(&str, usize, usize, usize, &mut ChaCha8Rng) -> Result<Edge>,
    ) -> Result<Self> {
        let t = template;
        let nm = t.norm_mode();
        let c0 = t.initial_channels;
        let stem = match t.kind {
            NetKind::Cls1d => Stem::Spectral {
                linear: Linear::new("stem.linear", t.bands, t.stem_length, rng),
                lift: Pointwise::new("stem.lift", 1, c0, rng),
                norm: Norm::new("stem.norm", c0, nm),
            },
            _ => Stem::Cube {
                conv: Pointwise::new("stem.conv", t.bands, c0, rng),
                norm: Norm::new("stem.norm", c0, nm),
            },
        };
        let down = t.downsample_after();
        let widths = t.block_widths();
        let mut blocks = Vec::with_capacity(t.blocks);
        for (b, &width) in widths.iter().enumerate() {
            let q = width / 4;
            let layers = (0..t.layers)
                .map(|l| {
                    let p = format!("b{}.l{}", b + 1, l + 1);
                    Ok(Layer {
                        squeeze: Pointwise::new(&format!("{p}.squeeze"), width, q, rng),
                        edge: edge(&format!("{p}.edge"), b, l, width, rng)?,
                        norm: Norm::new(&format!("{p}.norm"), q, nm),
                        expand: Pointwise::new(&format!("{p}.expand"), q, width, rng),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let transition = down.contains(&(b + 1)).then(|| Transition {
                widen: Pointwise::new(&format!("b{}.widen", b + 1), width, 2 * width, rng),
                norm: Norm::new(&format!("b{}.widen_norm", b + 1), 2 * width, nm),
            });
            blocks.push(Block { layers, transition });
        }
        let cf = t.final_width();
        let head = match t.kind {
            NetKind::Seg3d => Head::Map {
                conv: Pointwise::new("head.conv", cf, t.classes, rng),
                bias: Param::new("head.bias", fan_in_uniform(&[t.classes], cf, rng), ParamRole::Bias),
            },
            _ => Head::Pooled(Linear::new("head.linear", cf, t.classes, rng)),
        };
        Ok(Network {
            template: t.clone(),
            mode,
            stem,
            blocks,
            head,
        })
    }

    pub fn template(&self) -> &NetworkTemplate {
        &self.template
    }

    pub fn mode(&self) -> NetMode {
        self.mode
    }

    fn require(&self, mode: NetMode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::invalid(format!("operation needs a {mode:?}-mode network")));
        }
        Ok(())
    }

    /// Records a forward pass for a batched input (see
    /// [`NetworkTemplate::input_shape`] for the per-sample shape). With
    /// `train` set, batch normalization uses batch statistics.
    pub fn forward(&self, tape: &mut Tape, x: Var, train: bool) -> Result<Forward> {
        let t = &self.template;
        let shape = tape.value(x).shape().to_vec();
        let ok = match t.kind {
            NetKind::Cls1d => shape.len() == 2 && shape[1] == t.bands,
            NetKind::Cls3d => shape.len() == 4 && shape[1..] == [t.bands, t.patch, t.patch],
            NetKind::Seg3d => shape.len() == 4 && shape[1] == t.bands,
        };
        if !ok || shape[0] == 0 {
            let expect = match t.kind {
                NetKind::Cls1d => format!("(N, {})", t.bands),
                NetKind::Cls3d => format!("(N, {}, {p}, {p})", t.bands, p = t.patch),
                NetKind::Seg3d => format!("(1, {}, H, W)", t.bands),
            };
            return Err(Error::shape(format!(
                "{} network expects input {expect}, got {shape:?}",
                t.kind
            )));
        }
        let mut ctx = Ctx { train, stats: vec![] };
        let mut h = match &self.stem {
            Stem::Spectral { linear, lift, norm } => {
                let v = linear.forward(tape, x)?;
                let v = tape.reshape(v, &[shape[0], 1, t.stem_length])?;
                let v = lift.forward(tape, v)?;
                norm.forward(tape, v, &mut ctx)?
            }
            Stem::Cube { conv, norm } => {
                let v = conv.forward(tape, x)?;
                norm.forward(tape, v, &mut ctx)?
            }
        };
        let pool_axes: &[usize] = if t.kind == NetKind::Cls1d { &[2] } else { &[2, 3] };
        for block in &self.blocks {
            for layer in &block.layers {
                h = layer.forward(tape, h, &mut ctx)?;
            }
            if let Some(tr) = &block.transition {
                h = tape.pool_avg(h, 2, pool_axes)?;
                h = tr.widen.forward(tape, h)?;
                h = tr.norm.forward(tape, h, &mut ctx)?;
            }
        }
        let logits = match &self.head {
            Head::Pooled(lin) => {
                let g = tape.global_avg(h)?;
                lin.forward(tape, g)?
            }
            Head::Map { conv, bias } => {
                let z = conv.forward(tape, h)?;
                let b = tape.param(bias);
                let z = tape.add_channel_bias(z, b)?;
                tape.upsample_bilinear(z, (shape[2], shape[3]))?
            }
        };
        Ok(Forward {
            logits,
            stats: ctx.stats,
        })
    }

    /// Folds batch statistics of a training forward pass into the running
    /// estimates used at evaluation time.
    pub fn absorb_stats(&mut self, fwd: &Forward) {
        let mut norms = self.norms_mut();
        if norms.iter().all(|n| n.mode != NormMode::Batch) {
            return;
        }
        debug_assert_eq!(norms.len(), fwd.stats.len());
        for (n, s) in norms.iter_mut().zip(&fwd.stats) {
            n.absorb(s);
        }
    }

    /// Forward pass without gradient tracking, returning the logits.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.forward(&mut tape, xv, false)?;
        Ok(tape.value(f.logits).clone())
    }

    fn norms_mut(&mut self) -> Vec<&mut Norm> {
        let mut out = Vec::new();
        match &mut self.stem {
            Stem::Spectral { norm, .. } | Stem::Cube { norm, .. } => out.push(norm),
        }
        for block in &mut self.blocks {
            for layer in &mut block.layers {
                out.push(&mut layer.norm);
            }
            if let Some(tr) = &mut block.transition {
                out.push(&mut tr.norm);
            }
        }
        out
    }

    /// Every parameter and buffer in a fixed order.
    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        match &self.stem {
            Stem::Spectral { linear, lift, norm } => {
                out.extend([&linear.w, &linear.b, &lift.w]);
                out.extend(norm.params());
            }
            Stem::Cube { conv, norm } => {
                out.push(&conv.w);
                out.extend(norm.params());
            }
        }
        for block in &self.blocks {
            for layer in &block.layers {
                layer.visit(&mut out);
            }
            if let Some(tr) = &block.transition {
                out.push(&tr.widen.w);
                out.extend(tr.norm.params());
            }
        }
        match &self.head {
            Head::Pooled(lin) => out.extend([&lin.w, &lin.b]),
            Head::Map { conv, bias } => out.extend([&conv.w, bias]),
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        match &mut self.stem {
            Stem::Spectral { linear, lift, norm } => {
                out.extend([&mut linear.w, &mut linear.b, &mut lift.w]);
                out.extend(norm.params_mut());
            }
            Stem::Cube { conv, norm } => {
                out.push(&mut conv.w);
                out.extend(norm.params_mut());
            }
        }
        for block in &mut self.blocks {
            for layer in &mut block.layers {
                layer.visit_mut(&mut out);
            }
            if let Some(tr) = &mut block.transition {
                out.push(&mut tr.widen.w);
                out.extend(tr.norm.params_mut());
            }
        }
        match &mut self.head {
            Head::Pooled(lin) => out.extend([&mut lin.w, &mut lin.b]),
            Head::Map { conv, bias } => out.extend([&mut conv.w, bias]),
        }
        out
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn param_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.role.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Mixed edges in block-major order.
    pub fn mixed_edges(&self) -> Vec<&MixedEdge> {
        self.blocks
            .iter()
            .flat_map(|b| &b.layers)
            .filter_map(|l| match &l.edge {
                Edge::Mixed(e) => Some(e),
                Edge::Fixed(_) => None,
            })
            .collect()
    }

    pub fn mixed_edges_mut(&mut self) -> Vec<&mut MixedEdge> {
        self.blocks
            .iter_mut()
            .flat_map(|b| &mut b.layers)
            .filter_map(|l| match &mut l.edge {
                Edge::Mixed(e) => Some(e),
                Edge::Fixed(_) => None,
            })
            .collect()
    }

    /// Selected operation of every edge.
    pub fn derive_ops(&self) -> Result<Vec<Vec<DerivedOp>>> {
        self.require(NetMode::Search)?;
        Ok(self
            .blocks
            .iter()
            .map(|b| {
                b.layers
                    .iter()
                    .map(|l| match &l.edge {
                        Edge::Mixed(e) => e.derive(),
                        Edge::Fixed(_) => unreachable!("search network with a fixed edge"),
                    })
                    .collect()
            })
            .collect())
    }

    pub fn derive_architecture(&self) -> Result<ArchitectureMatrix> {
        ArchitectureMatrix::from_derived(&self.derive_ops()?)
    }

    /// The architecture of a derived network.
    pub fn architecture(&self) -> Result<ArchitectureMatrix> {
        match self.mode {
            NetMode::Search => self.derive_architecture(),
            NetMode::Derived => {
                let ops: Vec<Vec<DerivedOp>> = self
                    .blocks
                    .iter()
                    .map(|b| {
                        b.layers
                            .iter()
                            .map(|l| match &l.edge {
                                Edge::Fixed(f) => f.derived().clone(),
                                Edge::Mixed(e) => e.derive(),
                            })
                            .collect()
                    })
                    .collect();
                ArchitectureMatrix::from_derived(&ops)
            }
        }
    }
}

/// Search-mode network for `template`, seeded.
pub fn build(template: &NetworkTemplate, seed: u64) -> Result<Network> {
    Network::search(template, AlphaMode::Hyper, seed)
}
