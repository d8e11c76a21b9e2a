//! SGD with momentum, cosine annealing, and the search / training loops.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{image_batch, patch_batch, vector_batch, HsiCube, Sample};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Report};
use crate::mixedop::AlphaMode;
use crate::ndtensor::{Param, ParamId, ParamRole, Tape, Target, Tensor};
use crate::searchspace::{ArchitectureMatrix, NetKind, NetMode, Network};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub initial_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Samples per step for classifiers; segmentation always steps on one image.
    pub batch_size: usize,
    pub epochs: usize,
    /// Step size for free structural parameters (two-tier search only).
    pub alpha_lr: f64,
}

impl OptimConfig {
    fn base(kind: NetKind, epochs: usize) -> Self {
        let seg = kind == NetKind::Seg3d;
        OptimConfig {
            initial_lr: 0.01,
            min_lr: 0.0,
            weight_decay: 0.01,
            momentum: if seg { 0.9 } else { 0.0 },
            batch_size: if seg { 1 } else { 96 },
            epochs,
            alpha_lr: 0.01,
        }
    }

    pub fn search_defaults(kind: NetKind) -> Self {
        Self::base(kind, if kind == NetKind::Cls1d { 600 } else { 100 })
    }

    pub fn train_defaults(kind: NetKind) -> Self {
        Self::base(kind, if kind == NetKind::Cls1d { 1000 } else { 300 })
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.initial_lr,
            self.min_lr,
            self.weight_decay,
            self.momentum,
            self.alpha_lr,
        ];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(
                "optimizer rates, decay and momentum must be finite and nonnegative".into(),
            ));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `min + (init - min) (1 + cos(pi e / E)) / 2`.
pub fn cosine_lr(epoch: usize, cfg: &OptimConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} beyond schedule length {}",
            cfg.epochs
        )));
    }
    let t = epoch as f64 / cfg.epochs as f64;
    Ok(cfg.min_lr + 0.5 * (cfg.initial_lr - cfg.min_lr) * (1.0 + (PI * t).cos()))
}

/// Momentum buffers keyed by parameter identity.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: HashMap<ParamId, Tensor>,
}

/// `v <- momentum v + grad + wd p; p <- p - lr v`, with weight decay only
/// on convolution, linear and hyper-kernel weights.
pub fn sgd_step(params: &mut [&mut Param], state: &mut SgdState, lr: f64, cfg: &OptimConfig) -> Result<()> {
    for p in params.iter_mut() {
        if p.grad.shape() != p.value.shape() {
            return Err(Error::shape(format!(
                "gradient of {} has shape {:?}, parameter {:?}",
                p.name,
                p.grad.shape(),
                p.value.shape()
            )));
        }
        let wd = if p.role.decays() { cfg.weight_decay } else { 0.0 };
        let v = state
            .velocity
            .entry(p.id())
            .or_insert_with(|| Tensor::zeros(p.value.shape()));
        let (vd, gd) = (v.data_mut(), p.grad.data());
        let pd = p.value.data_mut();
        for i in 0..pd.len() {
            vd[i] = cfg.momentum * vd[i] + gd[i] + wd * pd[i];
            pd[i] -= lr * vd[i];
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<EpochRecord>,
}

impl LossLog {
    /// `epoch\ttrain_loss\tval_loss\tlr` per line; reals in shortest
    /// round-trip form so equal logs mean bit-identical values.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            writeln!(s, "{}\t{}\t{}\t{}", r.epoch, r.train_loss, r.val_loss, r.lr).unwrap();
        }
        s
    }
}

/// Builds network inputs and loss targets from labeled pixels of one scene.
pub struct Feeder<'a> {
    cube: &'a HsiCube,
    kind: NetKind,
    patch: usize,
    image: Option<Tensor>,
}

impl<'a> Feeder<'a> {
    pub fn new(net: &Network, cube: &'a HsiCube) -> Result<Self> {
        let t = net.template();
        if cube.bands() != t.bands {
            return Err(Error::Data(format!(
                "cube has {} bands but the network expects {}",
                cube.bands(),
                t.bands
            )));
        }
        let image = (t.kind == NetKind::Seg3d).then(|| image_batch(cube));
        Ok(Feeder {
            cube,
            kind: t.kind,
            patch: t.patch,
            image,
        })
    }

    pub fn batch(&self, samples: &[Sample]) -> Result<(Tensor, Vec<Target>)> {
        let w = self.cube.width();
        match self.kind {
            NetKind::Seg3d => {
                let targets = samples
                    .iter()
                    .map(|s| Target {
                        n: 0,
                        p: s.row * w + s.col,
                        class: s.target(),
                    })
                    .collect();
                Ok((
                    self.image.clone().expect("segmentation feeder holds the image"),
                    targets,
                ))
            }
            _ => {
                let x = if self.kind == NetKind::Cls1d {
                    vector_batch(self.cube, samples)?
                } else {
                    patch_batch(self.cube, samples, self.patch)?
                };
                let targets = samples
                    .iter()
                    .enumerate()
                    .map(|(n, s)| Target {
                        n,
                        p: 0,
                        class: s.target(),
                    })
                    .collect();
                Ok((x, targets))
            }
        }
    }

    /// Steps of one epoch: shuffled minibatches for classifiers, the whole
    /// set at once for segmentation.
    fn chunks(&self, samples: &[Sample], batch: usize) -> Vec<Vec<Sample>> {
        if self.kind == NetKind::Seg3d {
            vec![samples.to_vec()]
        } else {
            samples.chunks(batch).map(<[Sample]>::to_vec).collect()
        }
    }
}

fn check_classes(net: &Network, samples: &[Sample]) -> Result<()> {
    let k = net.template().classes;
    if let Some(s) = samples.iter().find(|s| s.class == 0 || usize::from(s.class) > k) {
        return Err(Error::Data(format!(
            "sample at ({}, {}) has class {} outside 1..={k}",
            s.row, s.col, s.class
        )));
    }
    Ok(())
}

fn finite(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Divergence(format!("{what}: loss is {loss}")))
    }
}

/// One gradient step on `samples`, updating parameters accepted by `update`.
/// Returns the batch loss.
#[allow(clippy::too_many_arguments)]
fn step(
    net: &mut Network,
    feeder: &Feeder,
    samples: &[Sample],
    lr: f64,
    cfg: &OptimConfig,
    state: &mut SgdState,
    update: impl Fn(ParamRole) -> bool,
    track_stats: bool,
    what: &str,
) -> Result<f64> {
    let (x, targets) = feeder.batch(samples)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let fwd = net.forward(&mut tape, xv, true)?;
    let loss_v = tape.cross_entropy(fwd.logits, &targets)?;
    let loss = finite(tape.value(loss_v).item()?, what)?;
    tape.backward(loss_v)?;
    let mut params: Vec<&mut Param> = net
        .params_mut()
        .into_iter()
        .filter(|p| p.role.trainable() && update(p.role))
        .collect();
    for p in params.iter_mut() {
        p.zero_grad();
    }
    tape.accumulate_into(params.iter_mut().map(|p| &mut **p));
    sgd_step(&mut params, state, lr, cfg)?;
    if params.iter().any(|p| !p.value.is_finite()) {
        return Err(Error::Divergence(format!("{what}: parameters became non-finite")));
    }
    if track_stats {
        net.absorb_stats(&fwd);
    }
    Ok(loss)
}

/// Mean loss over `samples` in evaluation mode; NaN for an empty set.
pub fn mean_loss(net: &Network, feeder: &Feeder, samples: &[Sample], batch: usize) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in feeder.chunks(samples, batch.max(1)) {
        let (x, targets) = feeder.batch(&chunk)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let fwd = net.forward(&mut tape, xv, false)?;
        let l = tape.cross_entropy(fwd.logits, &targets)?;
        total += tape.value(l).item()? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Fixed-length epoch loop updating every trainable parameter accepted by
/// `update` on `train`, logging validation loss.
#[allow(clippy::too_many_arguments)]
fn fit(
    net: &mut Network,
    cube: &HsiCube,
    train: &[Sample],
    val: &[Sample],
    cfg: &OptimConfig,
    seed: u64,
    update: impl Fn(ParamRole) -> bool + Copy,
    stage: &str,
) -> Result<LossLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data(format!("{stage}: training set is empty")));
    }
    check_classes(net, train)?;
    check_classes(net, val)?;
    let feeder = Feeder::new(net, cube)?;
    let mut rng = shuffle_rng(seed);
    let mut state = SgdState::default();
    let mut log = LossLog::default();
    let mut order = train.to_vec();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in feeder.chunks(&order, cfg.batch_size).iter().enumerate() {
            let what = format!("{stage} epoch {epoch} batch {b}");
            total += step(net, &feeder, chunk, lr, cfg, &mut state, update, true, &what)? * chunk.len() as f64;
        }
        let train_loss = total / order.len() as f64;
        let val_loss = mean_loss(net, &feeder, val, cfg.batch_size)?;
        if !val.is_empty() {
            finite(val_loss, &format!("{stage} epoch {epoch} validation"))?;
        }
        debug!("{stage} epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:.6}");
        log.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
    }
    if let Some(last) = log.records.last() {
        info!(
            "{stage} finished: train loss {:.5}, val loss {:.5}",
            last.train_loss, last.val_loss
        );
    }
    Ok(log)
}

/// One-tier search: ordinary SGD on every weight, hyper kernels included;
/// structural parameters are read off the kernels at the end.
pub fn search(
    net: &mut Network,
    cube: &HsiCube,
    train: &[Sample],
    val: &[Sample],
    cfg: &OptimConfig,
    seed: u64,
) -> Result<(ArchitectureMatrix, LossLog)> {
    if net.mode() != NetMode::Search {
        return Err(Error::invalid("search needs a search-mode network"));
    }
    let log = fit(
        net,
        cube,
        train,
        val,
        cfg,
        seed,
        |r| r != ParamRole::FreeAlpha,
        "search",
    )?;
    Ok((net.derive_architecture()?, log))
}

/// From-scratch training of a derived network.
pub fn train(
    net: &mut Network,
    cube: &HsiCube,
    train: &[Sample],
    val: &[Sample],
    cfg: &OptimConfig,
    seed: u64,
) -> Result<LossLog> {
    if net.mode() != NetMode::Derived {
        return Err(Error::invalid("training needs a derived network"));
    }
    fit(net, cube, train, val, cfg, seed, |_| true, "train")
}

/// Bilevel baseline with free structural parameters: every epoch first
/// updates weights on `half_a` with alphas frozen, then alphas (plain SGD
/// at `alpha_lr`, first-order) on `half_b` with weights frozen.
pub fn two_tier_search(
    net: &mut Network,
    cube: &HsiCube,
    half_a: &[Sample],
    half_b: &[Sample],
    cfg: &OptimConfig,
    seed: u64,
) -> Result<(ArchitectureMatrix, LossLog)> {
    cfg.validate()?;
    if net.mode() != NetMode::Search || net.mixed_edges().iter().any(|e| e.alpha_mode() != AlphaMode::Free) {
        return Err(Error::invalid(
            "two-tier search needs a search network with free structural parameters",
        ));
    }
    if half_a.is_empty() || half_b.is_empty() {
        return Err(Error::Data(
            "two-tier search needs both training halves non-empty".into(),
        ));
    }
    check_classes(net, half_a)?;
    check_classes(net, half_b)?;
    let feeder = Feeder::new(net, cube)?;
    let mut rng = shuffle_rng(seed);
    let (mut w_state, mut a_state) = (SgdState::default(), SgdState::default());
    let alpha_cfg = OptimConfig {
        momentum: 0.0,
        weight_decay: 0.0,
        ..cfg.clone()
    };
    let mut log = LossLog::default();
    let (mut order_a, mut order_b) = (half_a.to_vec(), half_b.to_vec());
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg)?;
        order_a.shuffle(&mut rng);
        order_b.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in feeder.chunks(&order_a, cfg.batch_size).iter().enumerate() {
            let what = format!("two-tier epoch {epoch} weight batch {b}");
            let is_weight = |r| r != ParamRole::FreeAlpha;
            total += step(net, &feeder, chunk, lr, cfg, &mut w_state, is_weight, true, &what)? * chunk.len() as f64;
        }
        let mut alpha_total = 0.0;
        for (b, chunk) in feeder.chunks(&order_b, cfg.batch_size).iter().enumerate() {
            let what = format!("two-tier epoch {epoch} alpha batch {b}");
            let is_alpha = |r| r == ParamRole::FreeAlpha;
            let l = step(
                net,
                &feeder,
                chunk,
                cfg.alpha_lr,
                &alpha_cfg,
                &mut a_state,
                is_alpha,
                false,
                &what,
            )?;
            alpha_total += l * chunk.len() as f64;
        }
        log.records.push(EpochRecord {
            epoch,
            train_loss: total / order_a.len() as f64,
            val_loss: alpha_total / order_b.len() as f64,
            lr,
        });
    }
    Ok((net.derive_architecture()?, log))
}

/// Index of the largest logit, ties to the smallest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted 0-based class of every sample.
pub fn predict(net: &Network, cube: &HsiCube, samples: &[Sample], batch: usize) -> Result<Vec<usize>> {
    let feeder = Feeder::new(net, cube)?;
    let k = net.template().classes;
    if net.template().kind == NetKind::Seg3d {
        let (x, _) = feeder.batch(&[])?;
        let logits = net.predict(&x)?;
        let hw = cube.height() * cube.width();
        let z = logits.data();
        return Ok(samples
            .iter()
            .map(|s| {
                let p = s.row * cube.width() + s.col;
                let col: Vec<f64> = (0..k).map(|c| z[c * hw + p]).collect();
                argmax(&col)
            })
            .collect());
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let (x, _) = feeder.batch(chunk)?;
        let logits = net.predict(&x)?;
        out.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(out)
}

/// Confusion matrix and metrics of `net` on `test`.
pub fn evaluate(net: &Network, cube: &HsiCube, test: &[Sample]) -> Result<Report> {
    if test.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    check_classes(net, test)?;
    let pred = predict(net, cube, test, 256)?;
    let cm = ConfusionMatrix::from_pairs(net.template().classes, test.iter().map(|s| s.target()).zip(pred))?;
    Report::from_confusion(cm)
}
